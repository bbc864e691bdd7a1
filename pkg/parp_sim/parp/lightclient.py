"""
The PARP light client.

A single-channel state machine that opens a channel after a signed handshake, pays per request
with cumulative signed amounts, judges every response as Valid, Invalid or Fraudulent, builds
fraud proofs for the provable cases and watches the chain for closes it was not told about.
"""
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
import logging

from .chain import (
    ChainError,
    ChannelStatus,
    CloseChannel,
    OpenChannel,
    SubmitState,
    error_is_justified,
    proof_supports_result,
)
from .codec import (
    CodecError,
    Method,
    ParpRequest,
    RpcCall,
    decode_response,
    encode_call,
    encode_header,
    encode_request,
    is_error_result,
    request_preimage,
    response_digest,
)
from .crypto import (
    CryptoError,
    address_from_public_bytes,
    address_of,
    consent_digest,
    digest,
    payment_digest,
    receipt_digest,
    sign,
    signed_by,
)
from .errors import ParpError


class ClientError(ParpError):
    """Base class for light client failures."""


class IllegalTransition(ClientError):
    """The state machine was asked to take a transition it does not have."""


class NoHeaders(ClientError):
    """The header store is empty, so there is no block to reference."""


class NotBonded(ClientError):
    """Requests need an open, bonded channel."""


class BudgetExhausted(ClientError):
    """The fee would push the cumulative amount past the budget."""


class BadReceiptSig(ClientError):
    """The open receipt was not signed by the node."""


class MissingHeader(ClientError):
    """The header at the response height is not known yet."""


class NotFraudulent(ClientError):
    """Fraud proofs only exist for rounds judged Fraudulent."""


class NoWitnessConfigured(ClientError):
    """There is no witness node to forward a fraud proof."""


class HeaderUnavailable(ClientError):
    """The header a proof check needs is not available."""


class Step(Enum):
    """The client's channel lifecycle."""

    IDLE = "IDLE"
    HANDSHAKING = "Handshaking"
    UNBONDED = "Unbonded"
    BONDED = "Bonded"
    UNBONDING = "Unbonding"


LEGAL_TRANSITIONS = {
    Step.IDLE: {Step.HANDSHAKING},
    Step.HANDSHAKING: {Step.UNBONDED, Step.IDLE},
    Step.UNBONDED: {Step.BONDED, Step.IDLE},
    Step.BONDED: {Step.UNBONDING},
    Step.UNBONDING: {Step.IDLE},
}

# Blocks left for a fraud proof to reach the chain before its response height leaves the hash window.
PROOF_MARGIN = 8


class Outcome(Enum):
    """The three verdict classes."""

    VALID = "Valid"
    INVALID = "Invalid"
    FRAUDULENT = "Fraudulent"


@dataclass(frozen=True)
class Verdict:
    """The client's judgement of one response; reason names the failed check."""

    outcome: Outcome
    reason: str = ""

    @classmethod
    def valid(cls):
        """Build a Valid verdict."""
        return cls(Outcome.VALID)

    @classmethod
    def invalid(cls, reason):
        """Build an Invalid verdict: untrustworthy but not provable on-chain."""
        return cls(Outcome.INVALID, reason)

    @classmethod
    def fraudulent(cls, condition):
        """Build a Fraudulent verdict for a condition the fraud detector can prove."""
        return cls(Outcome.FRAUDULENT, condition)

    def __str__(self):
        """Return e.g. "Valid" or "Fraudulent:PaymentMismatch"."""
        return f"{self.outcome.value}:{self.reason}" if self.reason else self.outcome.value


@dataclass(frozen=True)
class Handshake:
    """Opening message: the client's address and the tip it knows."""

    lc: bytes
    tip_hash: bytes


@dataclass
class Round:
    """One paid exchange kept as evidence until the channel is closed."""

    index: int
    request: ParpRequest
    req_bytes: bytes
    sent_at: int
    probe: bool = False
    res_bytes: bytes = None
    verdict: Verdict = None
    resent: bool = False
    deferred: bool = False
    timed_out: bool = False


@dataclass(frozen=True)
class SessionRecord:
    """The rounds of a finished channel."""

    alpha: int
    rounds: tuple


@dataclass(frozen=True)
class FraudProofSubmission:
    """Exact wire bytes of a fraudulent exchange plus the header at the response height."""

    alpha: int
    req_bytes: bytes
    res_bytes: bytes
    header_preimage: bytes
    witness: bytes


@dataclass
class ClientReaction:
    """What the client wants done after an event."""

    verdict: Verdict = None
    resend: bytes = None
    transactions: list = field(default_factory=list)
    fraud_proof: FraudProofSubmission = None
    recheck: bool = False
    probe: bool = False


class HeaderFeed:
    """Free, trusted header and channel queries answered by the chain."""

    def __init__(self, chain):
        """Wrap a chain."""
        self.chain = chain

    def tip(self):
        """Return the latest header."""
        return self.chain.tip.header

    def header(self, height):
        """Return the header at height, or None."""
        try:
            return self.chain.header_at(height)
        except ChainError:
            return None

    def channel(self, alpha):
        """Return the on-chain channel record, or None."""
        try:
            return self.chain.channel(alpha)
        except ChainError:
            return None


class LightClient:
    """A light client managing one payment channel at a time."""

    def __init__(self, name, private_key, config, feed, budget, witness=None, stale_close=False, emit=None):
        """Set up an idle client with its key, header feed and channel budget."""
        self.name = name
        self.private_key = private_key
        self.address = address_of(private_key.public_key)
        self.config = config
        self.feed = feed
        self.budget = budget
        self.witness = witness
        self.stale_close = stale_close
        self.emit = emit
        self.logger = logging.getLogger("django")
        self.step = Step.IDLE
        self.headers = OrderedDict()
        self.heights = {}
        self.sessions = []
        self._reset()

    def _reset(self):
        """Forget the current channel."""
        self.fn_addr = None
        self.alpha = None
        self.a = 0
        self.sigma_a = b""
        self.signed = []
        self.rounds = []
        self.halted = False
        self.fraud_at = None
        self.close_sent = False
        self.defended_with = None
        self.last_probe = 0
        self.hs_deadline = None
        self.open_deadline = None

    def _emit(self, record):
        """Pass a client event to the injected sink, if any."""
        if self.emit is not None:
            self.emit(record)

    def _transition(self, step):
        """Move to step, refusing transitions the lifecycle does not have."""
        if step not in LEGAL_TRANSITIONS[self.step]:
            raise IllegalTransition(f"{self.step.value} -> {step.value}", current=self.step.value)
        self.logger.info(f"{self.name}: {self.step.value} -> {step.value}.")
        self._emit({"type": "transition", "actor": self.name, "from": self.step.value, "to": step.value})
        self.step = step
        if step == Step.IDLE:
            if self.alpha is not None:
                self.sessions.append(SessionRecord(self.alpha, tuple(self.rounds)))
            self._reset()

    @property
    def tip(self):
        """Return the newest stored header."""
        if not self.headers:
            raise NoHeaders("No headers stored yet.")
        return next(reversed(self.headers.values()))

    def header_at(self, height):
        """Return the header at height from the store, else from the feed, else None."""
        block_hash = self.heights.get(height)
        if block_hash is not None:
            return self.headers[block_hash]
        return self.feed.header(height)

    def store_header(self, header):
        """Keep a header, evicting the oldest beyond the store size."""
        self.headers[header.hash] = header
        self.heights[header.height] = header.hash
        while len(self.headers) > self.config.header_store_size:
            _, oldest = self.headers.popitem(last=False)
            self.heights.pop(oldest.height, None)

    def start_handshake(self, fn_addr, now):
        """Ask a node for channel consent and arm the handshake timer."""
        if self.step != Step.IDLE:
            raise IllegalTransition(f"Cannot start a handshake while {self.step.value}.", current=self.step.value)
        tip = self.tip
        self._transition(Step.HANDSHAKING)
        self.fn_addr = fn_addr
        self.hs_deadline = now + self.config.hs_timer
        return Handshake(self.address, tip.hash)

    def on_hsconfirm(self, msg, now):
        """Check the node's consent and return the OpenChannel transaction, or None to keep waiting."""
        if self.step != Step.HANDSHAKING or now > self.hs_deadline:
            return None
        try:
            signer = address_from_public_bytes(msg.public_key)
        except CryptoError:
            return None
        consent_ok = signed_by(consent_digest(self.address, msg.expiry), msg.consent_sig, self.fn_addr)
        if signer != self.fn_addr or not consent_ok:
            self.logger.warning(f"{self.name} got a consent that does not verify.")
            return None
        if msg.expiry <= self.tip.height:
            self.logger.warning(f"{self.name} got an expired consent ({msg.expiry}).")
            return None
        self._transition(Step.UNBONDED)
        self.open_deadline = now + self.config.open_timeout
        return OpenChannel(self.address, self.fn_addr, msg.expiry, msg.consent_sig, self.budget)

    def on_open_receipt(self, receipt):
        """Bond to the channel once the node signs its id and the chain shows it."""
        if self.step == Step.BONDED and receipt.alpha == self.alpha:
            return
        if self.step != Step.UNBONDED:
            return
        if not signed_by(receipt_digest(receipt.alpha), receipt.signature, self.fn_addr):
            raise BadReceiptSig(f"Receipt for channel {receipt.alpha} is not from the node.", alpha=receipt.alpha)
        channel = self.feed.channel(receipt.alpha)
        if channel is None or channel.lc != self.address or channel.fn_addr != self.fn_addr:
            return
        self._transition(Step.BONDED)
        self.alpha = receipt.alpha
        self.a = 0
        self.last_probe = self.tip.height

    def build_request(self, call):
        """Sign a request paying the cumulative amount up to and including this call."""
        if self.step != Step.BONDED or self.halted:
            raise NotBonded(f"{self.name} is {self.step.value}.", current=self.step.value)
        amount = self.a + self.config.fee_for(call.method.fee_key)
        if amount > self.budget:
            raise BudgetExhausted(f"a={amount} exceeds budget {self.budget}.", a=amount)
        h_b = self.tip.hash
        gamma = encode_call(call)
        h_req = digest(request_preimage(self.alpha, h_b, amount, gamma))
        sigma_a = sign(payment_digest(self.alpha, amount), self.private_key)
        return ParpRequest(self.alpha, h_b, amount, gamma, h_req, sigma_a, sign(h_req, self.private_key))

    def liveness_probe(self):
        """Build the free GetChannelStatus request sent every probe period."""
        return self.build_request(RpcCall.get_channel_status(self.alpha))

    def dispatch(self, request, now, probe=False):
        """Record a request as sent and advance the spent amount to its a."""
        if self.step != Step.BONDED or request.a < self.a:
            raise NotBonded(f"{self.name} cannot dispatch a={request.a} while {self.step.value}.")
        if request.a != self.a or not self.signed:
            self.signed.append((request.a, request.sigma_a))
        self.a, self.sigma_a = request.a, request.sigma_a
        round_ = Round(len(self.rounds), request, encode_request(request), now, probe)
        self.rounds.append(round_)
        return round_

    def verify_response(self, round_, res_bytes):
        """Run the verdict pipeline; the first failing check decides."""
        request = round_.request
        try:
            response = decode_response(res_bytes)
        except CodecError:
            return Verdict.invalid("MalformedResponse")
        if response.h_req != request.h_req:
            return Verdict.invalid("RequestHashMismatch")
        if not signed_by(request.h_req, response.sigma_req, self.address):
            return Verdict.invalid("BadRequestSignature")
        if not signed_by(response_digest(response), response.sigma_res, self.fn_addr):
            return Verdict.invalid("BadResponseSignature")
        if response.alpha != request.alpha:
            return Verdict.invalid("ChannelMismatch")
        tip = self.feed.tip().height
        if response.m_b > tip or tip - response.m_b > self.config.hash_window - 1 - PROOF_MARGIN:
            return Verdict.invalid("ResponseOutsideWindow")
        if response.a != request.a:
            return Verdict.fraudulent("PaymentMismatch")
        referenced = self.headers.get(request.h_b)
        if referenced is not None and response.m_b < referenced.height:
            return Verdict.fraudulent("StaleHeight")
        call = request.call
        if call.method == Method.GET_CHANNEL_STATUS:
            return Verdict.valid()
        if is_error_result(call.method, response.result):
            if error_is_justified(call, response.result, self.config.max_tx_size):
                return Verdict.valid()
            if call.method == Method.GET_BALANCE:
                return Verdict.invalid("UnprovenError")
        header = self.header_at(response.m_b)
        if header is None:
            raise MissingHeader(f"No header at {response.m_b}.", m_b=response.m_b)
        if not proof_supports_result(call, response.result, response.proof, header):
            return Verdict.fraudulent("BadProof")
        return Verdict.valid()

    def on_response(self, round_, res_bytes):
        """Judge a response and decide what to do about it."""
        if round_.verdict is not None:
            return ClientReaction()
        try:
            verdict = self.verify_response(round_, res_bytes)
        except MissingHeader:
            if not round_.deferred:
                round_.deferred = True
                return ClientReaction(recheck=True)
            verdict = Verdict.invalid("MissingHeader")
        round_.res_bytes = res_bytes
        round_.verdict = verdict
        self._emit({"type": "verdict", "actor": self.name, "round": round_.index, "verdict": str(verdict)})
        if verdict.outcome == Outcome.VALID:
            return self._after_valid(round_, verdict)
        self.logger.warning(f"{self.name} round {round_.index}: {verdict}.")
        if verdict.outcome == Outcome.INVALID:
            if verdict.reason == "RequestHashMismatch" and not round_.resent:
                round_.resent = True
                round_.verdict = None
                return ClientReaction(verdict=verdict, resend=round_.req_bytes)
            return ClientReaction(verdict=verdict, transactions=self._halt_and_close())
        self.halted = True
        self.fraud_at = self.tip.height
        if self.step == Step.BONDED:
            self._transition(Step.UNBONDING)
        try:
            return ClientReaction(verdict=verdict, fraud_proof=self.construct_fraud_proof(round_))
        except ClientError as err:
            self.logger.warning(f"{self.name} cannot prove fraud ({err.code}); closing instead.")
            return ClientReaction(verdict=verdict, transactions=self._halt_and_close())

    def _after_valid(self, round_, verdict):
        """Cross-check a probe answer against the chain's view of the channel."""
        reaction = ClientReaction(verdict=verdict)
        if not round_.probe or self.step != Step.BONDED:
            return reaction
        result = decode_response(round_.res_bytes).result
        channel = self.feed.channel(self.alpha)
        if channel is None or is_error_result(Method.GET_CHANNEL_STATUS, result):
            return reaction
        if channel.status != ChannelStatus.OPEN:
            if result[0] == ChannelStatus.OPEN:
                self.logger.warning(f"{self.name}: node reports Open but the chain shows {channel.status.name}.")
            self.halted = True
            self._transition(Step.UNBONDING)
            reaction.transactions = self._defend(channel)
        return reaction

    def construct_fraud_proof(self, round_):
        """Bundle the exact request and response bytes with the header at the response height."""
        if round_.verdict is None or round_.verdict.outcome != Outcome.FRAUDULENT:
            raise NotFraudulent(f"Round {round_.index} is not fraudulent.", round=round_.index)
        if self.witness is None:
            raise NoWitnessConfigured(f"{self.name} has no witness node.")
        header = self.header_at(decode_response(round_.res_bytes).m_b)
        if header is None and round_.verdict.reason == "BadProof":
            raise HeaderUnavailable(f"No header for round {round_.index}.")
        preimage = encode_header(header) if header is not None else b""
        return FraudProofSubmission(self.alpha, round_.req_bytes, round_.res_bytes, preimage, self.witness)

    def _halt_and_close(self):
        """Stop sending requests and close with the last signed amount."""
        self.halted = True
        if self.close_sent or self.step not in (Step.BONDED, Step.UNBONDING):
            return []
        return [self.close()]

    def close(self):
        """Start closing the channel with the latest signed amount, or the oldest one under stale_close."""
        if self.step not in (Step.BONDED, Step.UNBONDING) or self.alpha is None:
            raise NotBonded(f"{self.name} has no channel to close.")
        a, sigma_a = self.a, self.sigma_a
        if self.stale_close and self.signed:
            a, sigma_a = self.signed[0]
        if self.step == Step.BONDED:
            self._transition(Step.UNBONDING)
        self.close_sent = True
        self.logger.info(f"{self.name} closes channel {self.alpha} at a={a}.")
        return CloseChannel(self.address, self.alpha, a, sigma_a)

    def _defend(self, channel):
        """Answer a close recorded below our latest amount with our own signed state."""
        if self.stale_close or channel.status != ChannelStatus.CLOSING:
            return []
        if channel.cs_a >= self.a or self.defended_with == self.a:
            return []
        self.defended_with = self.a
        self.logger.info(f"{self.name} disputes channel {self.alpha}: a={self.a} over {channel.cs_a}.")
        return [SubmitState(self.address, self.alpha, self.a, self.sigma_a)]

    def on_close_notice(self, notice):
        """Handle the node saying it is closing: stop requesting and watch the dispute."""
        if notice.alpha != self.alpha or self.step != Step.BONDED:
            return ClientReaction()
        self.halted = True
        self._transition(Step.UNBONDING)
        return ClientReaction()

    def on_header(self, header):
        """Store a header, then run the settlement watch, dispute defense and the probe schedule."""
        self.store_header(header)
        reaction = ClientReaction()
        if self.alpha is None or self.step not in (Step.BONDED, Step.UNBONDING):
            return reaction
        channel = self.feed.channel(self.alpha)
        if channel is None:
            return reaction
        if self.step == Step.UNBONDING:
            if channel.status == ChannelStatus.CLOSED:
                self.logger.info(f"{self.name} saw channel {self.alpha} settle at a={channel.cs_a}.")
                self._transition(Step.IDLE)
                return reaction
            reaction.transactions.extend(self._defend(channel))
            overdue = self.fraud_at is not None and header.height >= self.fraud_at + self.config.probe_period
            if overdue and channel.status == ChannelStatus.OPEN and not self.close_sent:
                reaction.transactions.append(self.close())
            return reaction
        if channel.status == ChannelStatus.CLOSED:
            self._transition(Step.UNBONDING)
            self._transition(Step.IDLE)
            return reaction
        if not self.halted and header.height - self.last_probe >= self.config.probe_period:
            self.last_probe = header.height
            reaction.probe = True
        return reaction

    def on_handshake_timeout(self, now):
        """Give up on a handshake that got no valid answer in time."""
        if self.step == Step.HANDSHAKING and now >= self.hs_deadline:
            self.logger.warning(f"{self.name} handshake timed out.")
            self._transition(Step.IDLE)

    def on_open_timeout(self, now):
        """Give up on an open receipt that never came."""
        if self.step == Step.UNBONDED and now >= self.open_deadline:
            self.logger.warning(f"{self.name} open receipt timed out.")
            self._transition(Step.IDLE)

    def on_request_timeout(self, round_):
        """Treat an unanswered request as an unresponsive node and close."""
        if round_.verdict is not None or round_.res_bytes is not None or round_.deferred:
            return ClientReaction()
        if round_.request.alpha != self.alpha:
            return ClientReaction()
        round_.timed_out = True
        self.logger.warning(f"{self.name} round {round_.index} timed out.")
        self._emit({"type": "timeout", "actor": self.name, "round": round_.index})
        return ClientReaction(transactions=self._halt_and_close())
