"""
Deterministic discrete-event simulation of clients, nodes and the chain.

Events run in (deliver_at, sequence) order on logical ticks. Every random choice comes from one
seeded RNG, so a scenario and seed fully determine the trace.
"""
from dataclasses import dataclass, field
from enum import Enum
import heapq
import json
import logging
import random

from .chain import Chain, ChainError, ChannelStatus, Transfer
from .codec import CodecError, RpcCall, decode_request, decode_response
from .crypto import digest, keygen
from .errors import ParpError
from .fullnode import CloseNotice, FullNode, HsConfirm, NodeError, OpenReceipt, RequestRejected
from .lightclient import ClientError, HeaderFeed, LightClient, Step

CHAIN = "chain"


class SimulationError(ParpError):
    """Base class for simulator failures."""


class ScriptReferenceError(SimulationError):
    """A scripted action or link names an actor the scenario does not declare."""


class BoundsViolation(SimulationError):
    """A delay range is empty, negative or above the synchrony bound."""


@dataclass(order=True)
class Event:
    """A scheduled delivery; ties on time break by insertion sequence."""

    deliver_at: int
    seq: int
    target: str = field(compare=False)
    payload: object = field(compare=False)


@dataclass(frozen=True)
class Envelope:
    """A network message or timer: kind, body, sender and the correlation id of a request."""

    kind: str
    body: object
    sender: str
    correlation: int = 0


def plain(value, names):
    """Turn a record value into JSON-ready data; known addresses become actor names."""
    if isinstance(value, bytes):
        return names.get(value, value.hex())
    if isinstance(value, Enum):
        return value.value if isinstance(value.value, str) else value.name
    if isinstance(value, dict):
        return {str(key): plain(item, names) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(item, names) for item in value]
    return value


class TraceLog:
    """The ordered list of trace records of one run."""

    def __init__(self, records=None):
        """Wrap a list of records."""
        self.records = records if records is not None else []

    def lines(self):
        """Return the trace as canonical JSON lines."""
        return [json.dumps(record, sort_keys=True, separators=(",", ":")) for record in self.records]

    def dumps(self):
        """Return the whole trace as text."""
        return "".join(line + "\n" for line in self.lines())

    def digest(self):
        """Return the hex digest of the trace text."""
        return digest(self.dumps().encode("utf-8")).hex()

    def write(self, path):
        """Write the trace to path."""
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(self.dumps())


class Simulation:
    """One run of a scenario."""

    def __init__(self, scenario, config):
        """Create keys, genesis, actors and the initial schedule of a scenario."""
        self.scenario = scenario
        self.config = config
        self.logger = logging.getLogger("django")
        self.rng = random.Random(scenario.seed)
        self.queue = []
        self.seq = 0
        self.now = 0
        self.records = []
        self.links = {}
        self.last_at = {}
        self.rounds = {}
        self.correlations = {}
        self.next_correlation = 1
        self.names = {}
        self.keys = {}
        self._check_references()
        self._check_delay(config.delay[0], config.delay[1])
        balances = {}
        for actor_id, balance in scenario.accounts.items():
            balances[self._keypair(actor_id)] = balance
        for actor in scenario.nodes:
            balances[self._keypair(actor["id"])] = actor.get("balance", 0)
        for actor in scenario.clients:
            balances[self._keypair(actor["id"])] = actor.get("balance", 0)
        self.chain = Chain(balances, config, emit=self.record)
        self.nodes = {}
        for actor in scenario.nodes:
            self.nodes[actor["id"]] = FullNode(
                actor["id"], self.keys[actor["id"]][0], self.chain, config, actor.get("policy", "Honest")
            )
        witness = self.keys[scenario.witness][1] if scenario.witness else None
        self.clients = {}
        for actor in scenario.clients:
            client = LightClient(
                actor["id"],
                self.keys[actor["id"]][0],
                config,
                HeaderFeed(self.chain),
                actor.get("budget", 1000),
                witness=witness,
                stale_close=actor.get("stale_close", False),
                emit=self.record,
            )
            client.store_header(self.chain.tip.header)
            self.clients[actor["id"]] = client
        self.serving = {actor["id"]: actor["node"] for actor in scenario.clients}
        for link in scenario.links:
            self.inject_delay((link["from"], link["to"]), link["min"], link["max"])
        self.record(
            {
                "type": "scenario",
                "name": scenario.name,
                "seed": scenario.seed,
                "config": config.as_dict(),
                "nodes": {actor["id"]: str(self.nodes[actor["id"]].policy) for actor in scenario.nodes},
                "clients": sorted(self.clients),
                "supply": self.chain.supply,
            }
        )
        for actor in scenario.nodes:
            if actor.get("deposit", 0):
                self.nodes[actor["id"]].deposit_tx(actor["deposit"])
        for index, action in enumerate(scenario.script):
            self.schedule(action.get("at", 0), CHAIN, Envelope("action", action, "script", index))
        if config.block_interval <= config.horizon:
            self.schedule(config.block_interval, CHAIN, Envelope("block", None, CHAIN))

    def _keypair(self, actor_id):
        """Draw the key of an actor from the seeded RNG and register its address."""
        private_key, address = keygen(self.rng)
        self.keys[actor_id] = (private_key, address)
        self.names[address] = actor_id
        return address

    def _check_references(self):
        """Require every scripted or linked actor to be declared."""
        scenario = self.scenario
        declared = set(scenario.accounts) | {actor["id"] for actor in scenario.nodes}
        declared |= {actor["id"] for actor in scenario.clients}
        nodes = {actor["id"] for actor in scenario.nodes}
        referenced = [actor["node"] for actor in scenario.clients]
        if scenario.witness:
            referenced.append(scenario.witness)
        for link in scenario.links:
            referenced.extend([link["from"], link["to"]])
        for action in scenario.script:
            for key in ("client", "node", "from", "to", "target"):
                if action.get(key) not in (None, "*"):
                    referenced.append(action[key])
        unknown = sorted({name for name in referenced if name not in declared | {CHAIN}})
        if unknown:
            raise ScriptReferenceError(f"Undeclared actors: {', '.join(unknown)}.", actors=unknown)
        bad_nodes = sorted({actor["node"] for actor in scenario.clients} - nodes)
        if bad_nodes or (scenario.witness and scenario.witness not in nodes):
            raise ScriptReferenceError("Clients and the witness must point at declared nodes.", actors=bad_nodes)

    def _check_delay(self, low, high):
        """Validate a delay range against the synchrony bound."""
        if not 0 <= low <= high <= self.config.max_delay:
            raise BoundsViolation(f"Delay [{low}, {high}] is outside [0, {self.config.max_delay}].")

    def inject_delay(self, link, low, high):
        """Give one directed link its own delay range."""
        for name in link:
            if name != CHAIN and name not in self.keys:
                raise ScriptReferenceError(f"Undeclared actor {name} on a link.", actors=[name])
        self._check_delay(low, high)
        self.links[tuple(link)] = (low, high)

    def record(self, record):
        """Append a trace record stamped with the current tick."""
        entry = plain(record, self.names)
        entry["t"] = self.now
        self.records.append(entry)

    def schedule(self, at, target, envelope):
        """Queue an envelope for delivery at tick at."""
        heapq.heappush(self.queue, Event(at, self.seq, target, envelope))
        self.seq += 1

    def send(self, sender, target, kind, body, correlation=0, size=0):
        """Send a message over the sender->target link with a sampled delay."""
        low, high = self.links.get((sender, target), tuple(self.config.delay))
        at = self.now + self.rng.randint(low, high)
        if self.scenario.ordered:
            at = max(at, self.last_at.get((sender, target), 0))
            self.last_at[(sender, target)] = at
        if at > self.config.horizon:
            self.record({"type": "drop", "kind": kind, "from": sender, "to": target, "corr": correlation})
            return
        self.record(
            {
                "type": "send",
                "kind": kind,
                "from": sender,
                "to": target,
                "corr": correlation,
                "size": size,
                "deliver_at": at,
            }
        )
        self.schedule(at, target, Envelope(kind, body, sender, correlation))

    def run(self):
        """Run until quiescence or the horizon and return the trace."""
        while self.queue:
            event = heapq.heappop(self.queue)
            if event.deliver_at > self.config.horizon:
                break
            self.now = event.deliver_at
            self.handle(event.target, event.payload)
            if self.quiescent():
                break
        self.record({"type": "end", "height": self.chain.height, "supply": self.chain.total_supply()})
        self.logger.info(f"Scenario {self.scenario.name} ended at t={self.now}, height {self.chain.height}.")
        return TraceLog(self.records)

    def quiescent(self):
        """Tell whether only block production is left to do."""
        if any(event.payload.kind != "block" for event in self.queue):
            return False
        idle = all(client.step == Step.IDLE for client in self.clients.values())
        return idle and self.chain.quiescent()

    def handle(self, target, envelope):
        """Route one event to its handler."""
        handler = getattr(self, f"on_{envelope.kind}")
        try:
            handler(target, envelope)
        except (ClientError, NodeError, ChainError) as err:
            self.logger.warning(f"t={self.now} {target} could not handle {envelope.kind}: {err.code}.")
            self.record({"type": "reject", "actor": target, "kind": envelope.kind, **err.as_record()})

    def on_block(self, target, envelope):
        """Produce a block and hand its header to every actor."""
        block = self.chain.produce_block(timestamp=self.now)
        for name in sorted(self.nodes):
            self.nodes[name].on_block(block)
            self.drain(name)
        for name in sorted(self.clients):
            self.react(name, self.clients[name].on_header(block.header))
        if self.now + self.config.block_interval <= self.config.horizon:
            self.schedule(self.now + self.config.block_interval, CHAIN, Envelope("block", None, CHAIN))

    def drain(self, node_name):
        """Send everything a node queued for clients."""
        node = self.nodes[node_name]
        outbox, node.outbox = node.outbox, []
        for delivery in outbox:
            client_name = self.names[delivery.recipient]
            if isinstance(delivery.message, OpenReceipt):
                self.send(node_name, client_name, "open_receipt", delivery.message)
            elif isinstance(delivery.message, CloseNotice):
                self.send(node_name, client_name, "close_notice", delivery.message)
            else:
                correlation = self.correlations.get((client_name, delivery.h_req), 0)
                self.respond(node_name, client_name, delivery.message, correlation)

    def respond(self, node_name, client_name, res_bytes, correlation):
        """Record a signed response and send it."""
        response = decode_response(res_bytes)
        self.record(
            {
                "type": "response",
                "node": node_name,
                "client": client_name,
                "corr": correlation,
                "size": len(res_bytes),
                "result_len": len(response.result),
                "proof_len": len(response.proof),
            }
        )
        self.send(node_name, client_name, "response", res_bytes, correlation, len(res_bytes))

    def on_action(self, target, envelope):
        """Run one scripted action."""
        action = envelope.body
        kind = action["action"]
        if kind == "deposit":
            self.nodes[action["node"]].deposit_tx(action["amount"])
        elif kind == "transfer":
            self.chain.submit(Transfer(self.keys[action["from"]][1], self.keys[action["to"]][1], action["amount"]))
        elif kind == "close" and action.get("node"):
            self.node_close(action["node"], action["client"], action.get("stale", False))
        else:
            for name in self._clients_of(action):
                getattr(self, f"client_{kind}")(name, action)

    def _clients_of(self, action):
        """Expand the client field of an action; "*" means every client."""
        if action.get("client", "*") == "*":
            return sorted(self.clients)
        return [action["client"]]

    def node_close(self, node_name, client_name, stale=False):
        """Let a node close its channel with a client, optionally with its oldest signed amount."""
        node = self.nodes[node_name]
        address = self.keys[client_name][1]
        for alpha, entry in sorted(node.ledger.items()):
            if entry.lc == address and entry.status == ChannelStatus.OPEN:
                node.initiate_close(alpha, stale)
        self.drain(node_name)

    def client_handshake(self, name, action):
        """Start a handshake with the client's node."""
        node_name = self.serving[name]
        message = self.clients[name].start_handshake(self.keys[node_name][1], self.now)
        self.send(name, node_name, "handshake", message)
        self.schedule(self.now + self.config.hs_timer, name, Envelope("hs_timeout", None, name))

    def client_close(self, name, action):
        """Let a client close its channel."""
        transaction = self.clients[name].close()
        self.send(name, CHAIN, "tx", transaction)

    def client_call(self, name, action):
        """Issue one paid call."""
        self.call(name, self._rpc_call(name, action, 0))

    def client_calls(self, name, action):
        """Schedule a batch of calls, per_tick of them on each tick."""
        per_tick = action.get("per_tick", 1)
        every = action.get("every", 1)
        for index in range(action.get("count", 1)):
            at = self.now + (index // per_tick) * every
            self.schedule(at, name, Envelope("call", {**action, "number": index}, name))

    def on_call(self, target, envelope):
        """Issue a call scheduled by a batch."""
        self.call(target, self._rpc_call(target, envelope.body, envelope.body["number"]))

    def _rpc_call(self, name, action, number):
        """Build the RPC call an action asks for."""
        method = action.get("method", "get_balance")
        send_every = action.get("send_every")
        if send_every and (number + 1) % send_every == 0:
            method = "send_transaction"
        if method == "send_transaction":
            payload = action.get("payload", "").encode("utf-8") or f"{name}:{number}:{self.now}".encode("utf-8")
            return RpcCall.send_transaction(payload)
        if method == "get_channel_status":
            return RpcCall.get_channel_status(action.get("channel", self.clients[name].alpha or 0))
        return RpcCall.get_balance(self.keys[action.get("target", name)][1])

    def call(self, name, rpc_call, probe=False):
        """Build, dispatch and send a request, and arm its timeout."""
        client = self.clients[name]
        if client.step != Step.BONDED or client.halted:
            self.record({"type": "skip", "client": name, "step": client.step, "probe": probe})
            return
        request = client.liveness_probe() if probe else client.build_request(rpc_call)
        round_ = client.dispatch(request, self.now, probe)
        correlation = self.next_correlation
        self.next_correlation += 1
        self.rounds[correlation] = (name, round_)
        self.correlations[(name, request.h_req)] = correlation
        self.record(
            {
                "type": "request",
                "client": name,
                "node": self.serving[name],
                "corr": correlation,
                "round": round_.index,
                "method": request.call.method.fee_key,
                "a": request.a,
                "size": len(round_.req_bytes),
                "gamma_len": len(request.gamma),
                "probe": probe,
            }
        )
        self.send(name, self.serving[name], "request", round_.req_bytes, correlation, len(round_.req_bytes))
        timeout = self.now + self.config.request_timeout
        self.schedule(timeout, name, Envelope("request_timeout", None, name, correlation))

    def on_handshake(self, target, envelope):
        """Have a node answer a handshake with its consent."""
        confirm = self.nodes[target].handle_handshake(envelope.body.lc)
        self.send(target, envelope.sender, "hsconfirm", confirm)

    def on_hsconfirm(self, target, envelope):
        """Have a client check the consent and ask its node to relay the open transaction."""
        if not isinstance(envelope.body, HsConfirm):
            return
        transaction = self.clients[target].on_hsconfirm(envelope.body, self.now)
        if transaction is not None:
            self.send(target, envelope.sender, "open", transaction)
            self.schedule(self.now + self.config.open_timeout, target, Envelope("open_timeout", None, target))

    def on_open(self, target, envelope):
        """Have a node relay an OpenChannel transaction."""
        self.nodes[target].relay_open(envelope.body)

    def on_open_receipt(self, target, envelope):
        """Have a client bond on a signed receipt."""
        self.clients[target].on_open_receipt(envelope.body)

    def on_close_notice(self, target, envelope):
        """Tell a client that its node is closing."""
        self.react(target, self.clients[target].on_close_notice(envelope.body))

    def on_request(self, target, envelope):
        """Have a node serve a request."""
        node = self.nodes[target]
        try:
            request = decode_request(envelope.body)
        except CodecError:
            request = None
        try:
            res_bytes = node.serve(envelope.body)
        except RequestRejected as err:
            self.logger.warning(f"t={self.now} {target} rejected a request: {err.code}.")
            rejection = {"type": "reject", "actor": target, "kind": "request", "corr": envelope.correlation}
            self.record({**rejection, **err.as_record()})
            return
        method = request.call.method.fee_key if request is not None else None
        outcome = "responded" if res_bytes is not None else "pending"
        if res_bytes is None and str(node.policy) == "Unresponsive":
            outcome = "silent"
        self.record(
            {
                "type": "serve",
                "node": target,
                "corr": envelope.correlation,
                "method": method,
                "policy": str(node.policy),
                "outcome": outcome,
            }
        )
        if res_bytes is not None:
            self.respond(target, envelope.sender, res_bytes, envelope.correlation)

    def on_response(self, target, envelope):
        """Have a client judge a response."""
        name, round_ = self.rounds[envelope.correlation]
        self.react(name, self.clients[name].on_response(round_, envelope.body), envelope)

    def on_recheck(self, target, envelope):
        """Retry a verdict that waited for a header."""
        self.on_response(target, envelope)

    def on_fraud_proof(self, target, envelope):
        """Have the witness forward a fraud proof on-chain."""
        self.nodes[target].forward_fraud_proof(envelope.body)

    def on_tx(self, target, envelope):
        """Have the chain accept a transaction into its mempool."""
        self.chain.submit(envelope.body)

    def on_hs_timeout(self, target, envelope):
        """Handshake timer."""
        self.clients[target].on_handshake_timeout(self.now)

    def on_open_timeout(self, target, envelope):
        """Open receipt timer."""
        self.clients[target].on_open_timeout(self.now)

    def on_request_timeout(self, target, envelope):
        """Request timer."""
        name, round_ = self.rounds[envelope.correlation]
        self.react(name, self.clients[name].on_request_timeout(round_))

    def react(self, name, reaction, envelope=None):
        """Carry out what a client decided."""
        node_name = self.serving[name]
        if reaction.resend is not None:
            self.send(name, node_name, "request", reaction.resend, envelope.correlation, len(reaction.resend))
        for transaction in reaction.transactions:
            self.send(name, CHAIN, "tx", transaction)
        if reaction.fraud_proof is not None:
            alpha = reaction.fraud_proof.alpha
            self.record({"type": "fraud_proof", "client": name, "witness": self.scenario.witness, "alpha": alpha})
            self.send(name, self.scenario.witness, "fraud_proof", reaction.fraud_proof)
        if reaction.recheck:
            recheck = Envelope("recheck", envelope.body, node_name, envelope.correlation)
            self.schedule(self.now + self.config.block_interval, name, recheck)
        if reaction.probe:
            self.call(name, None, probe=True)

    def steps(self):
        """Return each client's current lifecycle step."""
        return {name: client.step.value for name, client in sorted(self.clients.items())}


def run(scenario, config):
    """Run a scenario and return its trace."""
    return Simulation(scenario, config).run()
