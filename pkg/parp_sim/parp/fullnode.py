"""A PARP serving node with a per-channel ledger and scriptable misbehavior."""
from dataclasses import dataclass, field, replace
from enum import Enum
import logging

from .chain import ChainError, ChannelStatus, CloseChannel, Deposit, OpenChannel, Payload, SubmitFraudProof, SubmitState
from .codec import (
    CodecError,
    Method,
    ParpResponse,
    decode_request,
    encode_response,
    error_result,
    request_digest,
    response_digest,
)
from .crypto import SIGNATURE_SIZE, address_of, consent_digest, digest, payment_digest, receipt_digest, sign, signed_by
from .errors import ParpError
from .trie import KeyAbsent, MerkleProof, decode_proof, encode_proof, tx_key


class NodeError(ParpError):
    """Base class for full node failures."""


class NotDeposited(NodeError):
    """The node has no active deposit and refuses to serve."""


class RequestRejected(NodeError):
    """Base class for requests the node will not serve."""


class UnknownChannel(RequestRejected):
    """The channel is not open in this node's ledger."""


class BadHash(RequestRejected):
    """The request hash does not recompute."""


class BadSig(RequestRejected):
    """A request signature does not recover to the channel's client."""


class InsufficientPayment(RequestRejected):
    """The cumulative amount does not cover the fee."""


class OverBudget(RequestRejected):
    """The cumulative amount exceeds the channel budget."""


class UnknownBlockRef(RequestRejected):
    """The referenced block hash is unknown or too old."""


class Behavior(Enum):
    """How a node treats the responses it signs."""

    HONEST = "Honest"
    WRONG_AMOUNT = "WrongAmount"
    STALE_HEIGHT = "StaleHeight"
    BOGUS_PROOF = "BogusProof"
    BAD_RESPONSE_SIG = "BadResponseSig"
    WRONG_CHANNEL_ID = "WrongChannelId"
    WRONG_REQUEST_HASH = "WrongRequestHash"
    UNRESPONSIVE = "Unresponsive"
    STALE_STATE_CLOSE = "StaleStateClose"


@dataclass(frozen=True)
class BehaviorPolicy:
    """The single active behavior of a node instance and its parameters."""

    kind: Behavior = Behavior.HONEST
    delta: int = 10
    lag: int = 5

    @classmethod
    def parse(cls, raw):
        """Build a policy from a name such as "WrongAmount" or a dict with kind, delta and lag."""
        if isinstance(raw, cls):
            return raw
        if isinstance(raw, str):
            raw = {"kind": raw}
        params = {key: value for key, value in raw.items() if key != "kind"}
        try:
            return cls(Behavior(raw.get("kind", "Honest")), **params)
        except (ValueError, TypeError) as err:
            raise NodeError(f"Unknown behavior policy {raw!r}.") from err

    def __str__(self):
        """Return the policy name."""
        return self.kind.value


@dataclass(frozen=True)
class HsConfirm:
    """Handshake answer: the node's public key, the consent expiry and the consent signature."""

    public_key: bytes
    expiry: int
    consent_sig: bytes


@dataclass(frozen=True)
class OpenReceipt:
    """The node's signature over a freshly opened channel id."""

    alpha: int
    signature: bytes


@dataclass(frozen=True)
class CloseNotice:
    """Tells the client that the node started closing its channel."""

    alpha: int
    a: int


@dataclass(frozen=True)
class Delivery:
    """A message the node sends to a client outside of a direct request/response exchange."""

    recipient: bytes
    message: object
    h_req: bytes = b""


@dataclass
class LedgerEntry:
    """What the node knows about one of its channels."""

    lc: bytes
    budget: int
    last_a: int = 0
    last_sigma_a: bytes = b""
    status: ChannelStatus = ChannelStatus.OPEN
    history: list = field(default_factory=list)
    defended_with: int = None


class FullNode:
    """A staked node serving paid requests over its channels."""

    def __init__(self, name, private_key, chain, config=None, policy=None):
        """Bind the node to its key, its view of the chain and its behavior policy."""
        self.name = name
        self.private_key = private_key
        self.address = address_of(private_key.public_key)
        self.chain = chain
        self.config = config or chain.config
        self.policy = BehaviorPolicy.parse(policy or BehaviorPolicy())
        self.ledger = {}
        self.consents = set()
        self.cache = {}
        self.deferred = {}
        self.pending = set()
        self.outbox = []
        self.logger = logging.getLogger("django")

    def __repr__(self):
        """Return a short description for logs."""
        return f"FullNode({self.name}, {self.policy})"

    @property
    def behaves(self):
        """Return the active behavior kind."""
        return self.policy.kind

    def deposit_tx(self, amount):
        """Submit a deposit into the deposit module."""
        transaction = Deposit(self.address, amount)
        self.chain.submit(transaction)
        return transaction

    def handle_handshake(self, lc_address):
        """Consent to a channel with lc_address until consent_ttl blocks from now."""
        if self.chain.deposits.get(self.address, 0) < self.config.min_deposit:
            raise NotDeposited(f"{self.name} has no active deposit.")
        expiry = self.chain.height + self.config.consent_ttl
        consent = sign(consent_digest(lc_address, expiry), self.private_key)
        self.consents.add((bytes(lc_address), expiry))
        self.logger.info(f"{self.name} consented to a channel with {lc_address.hex()} until {expiry}.")
        return HsConfirm(self.private_key.public_key.to_bytes(), expiry, consent)

    def relay_open(self, transaction):
        """Forward a client's OpenChannel transaction to the chain."""
        if not isinstance(transaction, OpenChannel) or transaction.fn_addr != self.address:
            raise NodeError("Only OpenChannel transactions naming this node are relayed.")
        return self.chain.submit(transaction)

    def on_block(self, block):
        """React to a new block: issue open receipts, finish deferred responses and defend disputes."""
        for index, (transaction, receipt) in enumerate(zip(block.transactions, block.receipts)):
            if isinstance(transaction, OpenChannel) and receipt.accepted:
                self._channel_opened(transaction, receipt.data["alpha"])
            elif isinstance(transaction, Payload) and self.deferred.get(transaction.hash):
                request = self.deferred[transaction.hash].pop(0)
                if receipt.accepted:
                    proof = encode_proof(block.tx_trie.prove(tx_key(index)))
                    response = self._respond(request, block.height, transaction.hash, proof)
                else:
                    response = self._respond(request, block.height, error_result("MalformedTransaction"), b"")
                self.pending.discard(request.h_req)
                self.outbox.append(Delivery(self.ledger[request.alpha].lc, response, request.h_req))
        for alpha, entry in sorted(self.ledger.items()):
            self._watch(alpha, entry)
        self.consents = {consent for consent in self.consents if consent[1] > block.height}

    def _channel_opened(self, transaction, alpha):
        """Record a channel opened with one of this node's consents and sign its id."""
        consent = (transaction.sender, transaction.expiry)
        if transaction.fn_addr != self.address or consent not in self.consents:
            return
        self.consents.discard(consent)
        self.ledger[alpha] = LedgerEntry(transaction.sender, transaction.budget)
        self.logger.info(f"{self.name} opened channel {alpha} with budget {transaction.budget}.")
        receipt = OpenReceipt(alpha, sign(receipt_digest(alpha), self.private_key))
        self.outbox.append(Delivery(transaction.sender, receipt))

    def _watch(self, alpha, entry):
        """Mirror the on-chain channel status and answer a stale close with the latest state."""
        channel = self.chain.channel(alpha)
        if self.behaves == Behavior.STALE_STATE_CLOSE and channel.status == ChannelStatus.CLOSING:
            return
        entry.status = channel.status
        if channel.status == ChannelStatus.CLOSED:
            self.cache.pop(alpha, None)
        if channel.status != ChannelStatus.CLOSING:
            return
        if channel.cs_a < entry.last_a and entry.defended_with != entry.last_a:
            entry.defended_with = entry.last_a
            self.chain.submit(SubmitState(self.address, alpha, entry.last_a, entry.last_sigma_a))
            self.logger.info(f"{self.name} disputes channel {alpha} with a={entry.last_a} over {channel.cs_a}.")

    def verify_request(self, request):
        """Check a decoded request against the ledger; raise the first reason to refuse it."""
        entry = self.ledger.get(request.alpha)
        if entry is None or entry.status != ChannelStatus.OPEN:
            raise UnknownChannel(f"Channel {request.alpha} is not open here.", alpha=request.alpha)
        if request_digest(request) != request.h_req:
            raise BadHash("Request hash does not recompute.", alpha=request.alpha)
        if not signed_by(request.h_req, request.sigma_req, entry.lc):
            raise BadSig("Request signature does not recover to the client.", alpha=request.alpha)
        if not signed_by(payment_digest(request.alpha, request.a), request.sigma_a, entry.lc):
            raise BadSig("Payment signature does not recover to the client.", alpha=request.alpha)
        fee = self.config.fee_for(request.call.method.fee_key)
        if request.a < entry.last_a + fee:
            raise InsufficientPayment(f"a={request.a} does not cover {entry.last_a} + {fee}.", alpha=request.alpha)
        if request.a > entry.budget:
            raise OverBudget(f"a={request.a} exceeds budget {entry.budget}.", alpha=request.alpha)
        try:
            self.chain.get_block_height_by_hash(request.h_b)
        except ChainError as err:
            raise UnknownBlockRef(f"Block reference rejected: {err.code}.", alpha=request.alpha) from err
        return entry

    def serve(self, req_bytes):
        """Answer a wire request; returns the signed response bytes, or None when deferred or silent."""
        try:
            request = decode_request(req_bytes)
        except CodecError as err:
            raise RequestRejected(f"Request does not decode: {err.code}.") from err
        cached = self.cache.get(request.alpha, {}).get(request.h_req)
        if cached is not None:
            return cached
        if request.h_req in self.pending:
            return None
        entry = self.verify_request(request)
        if request.a != entry.last_a or not entry.history:
            entry.history.append((request.a, request.sigma_a))
        entry.last_a, entry.last_sigma_a = request.a, request.sigma_a
        self.logger.debug(f"{self.name} accepted {request.call.method.name} on channel {request.alpha} a={request.a}.")
        if self.behaves == Behavior.UNRESPONSIVE:
            return None
        return self.execute_and_respond(request)

    def execute_and_respond(self, request):
        """Run the RPC call and return the signed response, or None for a transaction awaiting inclusion."""
        call = request.call
        height = self.chain.height
        if call.method == Method.GET_BALANCE:
            try:
                proof = self.chain.state_at(height).prove(call.address)
            except KeyAbsent:
                return self._respond(request, height, error_result("UnknownAccount"), b"")
            return self._respond(request, height, proof.value, encode_proof(proof))
        if call.method == Method.SEND_TRANSACTION:
            if not call.payload or len(call.payload) > self.config.max_tx_size:
                return self._respond(request, height, error_result("MalformedTransaction"), b"")
            transaction = Payload(self.ledger[request.alpha].lc, call.payload)
            self.chain.submit(transaction)
            self.deferred.setdefault(transaction.hash, []).append(request)
            self.pending.add(request.h_req)
            return None
        try:
            channel = self.chain.channel(call.channel_id)
        except ChainError:
            return self._respond(request, height, error_result("UnknownChannel"), b"")
        status = channel.status
        if self.behaves == Behavior.STALE_STATE_CLOSE and channel.fn_addr == self.address:
            status = ChannelStatus.OPEN
        return self._respond(request, height, bytes([status]), b"")

    def _respond(self, request, m_b, result, proof):
        """Sign a response, applying the active misbehavior, and cache it under the request hash."""
        kind = self.behaves
        alpha, a, h_req = request.alpha, request.a, request.h_req
        if kind == Behavior.WRONG_CHANNEL_ID:
            alpha += 1
        elif kind == Behavior.WRONG_AMOUNT:
            a += self.policy.delta
        elif kind == Behavior.STALE_HEIGHT:
            m_b = max(0, m_b - self.policy.lag)
        elif kind == Behavior.WRONG_REQUEST_HASH:
            h_req = digest(request.h_req)
        elif kind == Behavior.BOGUS_PROOF and proof:
            result, proof = self._tamper(result, proof)
        response = ParpResponse(alpha, m_b, a, result, proof, h_req, request.sigma_req, bytes(SIGNATURE_SIZE))
        signed = response_digest(response)
        if kind == Behavior.BAD_RESPONSE_SIG:
            signed = digest(signed)
        encoded = encode_response(replace(response, sigma_res=sign(signed, self.private_key)))
        self.cache.setdefault(request.alpha, {})[request.h_req] = encoded
        return encoded

    @staticmethod
    def _tamper(result, proof_bytes):
        """Flip the last byte of the proven value; a result equal to the value follows it."""
        proof = decode_proof(proof_bytes)
        value = proof.value[:-1] + bytes([proof.value[-1] ^ 0x01])
        if result == proof.value:
            result = value
        return result, encode_proof(MerkleProof(proof.nodes, proof.key, value))

    def initiate_close(self, alpha, stale=False):
        """
        Close a channel with the latest signed state.

        With stale=True, or under StaleStateClose, the oldest retained state is used instead. Only
        StaleStateClose keeps the client uninformed; every other close sends a CloseNotice.
        """
        entry = self.ledger.get(alpha)
        if entry is None:
            raise UnknownChannel(f"Channel {alpha} is not in the ledger.", alpha=alpha)
        a, sigma_a = entry.last_a, entry.last_sigma_a
        silent = self.behaves == Behavior.STALE_STATE_CLOSE
        if (stale or silent) and entry.history:
            a, sigma_a = entry.history[0]
            entry.defended_with = entry.last_a
        transaction = CloseChannel(self.address, alpha, a, sigma_a)
        self.chain.submit(transaction)
        self.logger.info(f"{self.name} closes channel {alpha} at a={a}.")
        if not silent:
            self.outbox.append(Delivery(entry.lc, CloseNotice(alpha, a)))
        return transaction

    def forward_fraud_proof(self, submission):
        """Forward a client's fraud proof to the chain verbatim, as the witness."""
        transaction = SubmitFraudProof(
            self.address, submission.req_bytes, submission.res_bytes, submission.header_preimage
        )
        self.chain.submit(transaction)
        self.logger.info(f"{self.name} forwarded a fraud proof on channel {submission.alpha}.")
        return transaction
