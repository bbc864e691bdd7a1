"""
A simulated blockchain carrying the three on-chain PARP modules.

The deposit module, the channels module and the fraud detector all run as deterministic
state transitions while a block is produced. Transaction failures become rejected receipts.
"""
from dataclasses import dataclass, field
from enum import IntEnum
import logging

from .codec import (
    BlockHeader,
    CodecError,
    Method,
    Reader,
    decode_header,
    decode_request,
    decode_response,
    error_result,
    fixed,
    is_error_result,
    prefixed,
    request_digest,
    response_digest,
    u64,
)
from .conf import ParpConfig
from .crypto import ADDRESS_SIZE, DIGEST_SIZE, consent_digest, digest, payment_digest, signed_by
from .errors import ParpError
from .trie import EMPTY_ROOT, KeyAbsent, Trie, decode_proof, tx_key, verify_proof


class ChainError(ParpError):
    """Base class for transaction rejections."""


class InsufficientBalance(ChainError):
    """The sender cannot cover the amount."""


class BelowMinimum(ChainError):
    """A deposit is smaller than the minimum stake."""


class BadConsent(ChainError):
    """The consent signature does not recover to the named full node."""


class ConsentExpired(ChainError):
    """The consent expiry lies before the block height."""


class NodeNotDeposited(ChainError):
    """The full node has no eligible deposit."""


class ChannelUnknown(ChainError):
    """No channel has this id."""


class ChannelClosed(ChainError):
    """The channel is already settled."""


class NotParticipant(ChainError):
    """The sender is neither the client nor the node of the channel."""


class BadPaymentSig(ChainError):
    """The payment signature does not recover to the channel's client."""


class OverBudget(ChainError):
    """The amount exceeds the channel budget."""


class AlreadyClosing(ChainError):
    """The channel is already in its dispute window."""


class NotClosing(ChainError):
    """The operation needs a channel in its dispute window."""


class StaleState(ChainError):
    """The submitted amount is not above the recorded one."""


class DisputeWindowClosed(ChainError):
    """The dispute deadline has passed."""


class DisputeWindowOpen(ChainError):
    """The dispute deadline has not passed yet."""


class MalformedTransaction(ChainError):
    """An application payload is empty or too large."""


class MalformedEvidence(ChainError):
    """A fraud proof does not decode."""


class IdentifierMismatch(ChainError):
    """Request and response name different channels."""


class RequestIntegrityFail(ChainError):
    """The request hash or the client's request signature does not check out."""


class OriginMismatch(ChainError):
    """The response was not signed by the channel's node."""


class ResponseUnlinked(ChainError):
    """The response does not echo the request hash."""


class UnknownHash(ChainError):
    """The block hash was never recorded."""


class UnknownHeight(ChainError):
    """No block exists at this height."""


class OutsideWindow(ChainError):
    """The block is older than the queryable hash window."""


class HeaderMismatch(ChainError):
    """The submitted header is not the recorded header at the response height."""


class ProofRejected(ChainError):
    """Every check passed and no fraud condition holds."""


class NothingToSlash(ChainError):
    """The node has no deposit left."""


class ConservationViolation(ChainError):
    """Total supply changed across a block."""


class UnknownTransactionType(CodecError):
    """A transaction encoding starts with an unknown tag."""


class ChannelStatus(IntEnum):
    """Lifecycle of a payment channel."""

    OPEN = 0
    CLOSING = 1
    CLOSED = 2


@dataclass
class PaymentChannel:
    """On-chain record of a channel between a light client and a full node."""

    alpha: int
    lc: bytes
    fn_addr: bytes
    budget: int
    cs_a: int = 0
    cs_sigma: bytes = b""
    status: ChannelStatus = ChannelStatus.OPEN
    dispute_deadline: int = 0


def _address(value):
    """Encode a 20-byte address field."""
    return fixed(value, ADDRESS_SIZE, "address")


ENCODERS = {"u64": u64, "address": _address, "bytes": prefixed}


@dataclass(frozen=True)
class Transaction:
    """Common part of every on-chain transaction: a tag, the sender and typed fields."""

    sender: bytes

    TAG = 0x00
    FIELDS = ()

    def encode(self):
        """Return 1-byte tag || sender || fields."""
        parts = [bytes([self.TAG]), _address(self.sender)]
        parts.extend(ENCODERS[kind](getattr(self, name)) for name, kind in self.FIELDS)
        return b"".join(parts)

    @property
    def hash(self):
        """Return the transaction hash."""
        return digest(self.encode())

    @property
    def kind(self):
        """Return the variant name used in receipts and traces."""
        return type(self).__name__


@dataclass(frozen=True)
class Deposit(Transaction):
    """Stake tokens in the deposit module."""

    amount: int

    TAG = 0x10
    FIELDS = (("amount", "u64"),)


@dataclass(frozen=True)
class OpenChannel(Transaction):
    """Lock a budget in a new channel with a consenting full node."""

    fn_addr: bytes
    expiry: int
    consent_sig: bytes
    budget: int

    TAG = 0x11
    FIELDS = (("fn_addr", "address"), ("expiry", "u64"), ("consent_sig", "bytes"), ("budget", "u64"))


@dataclass(frozen=True)
class CloseChannel(Transaction):
    """Start the dispute window with a signed cumulative amount."""

    alpha: int
    a: int
    sigma_a: bytes

    TAG = 0x12
    FIELDS = (("alpha", "u64"), ("a", "u64"), ("sigma_a", "bytes"))


@dataclass(frozen=True)
class SubmitState(Transaction):
    """Replace the recorded state with a higher signed amount during the dispute window."""

    alpha: int
    a: int
    sigma_a: bytes

    TAG = 0x13
    FIELDS = (("alpha", "u64"), ("a", "u64"), ("sigma_a", "bytes"))


@dataclass(frozen=True)
class ConfirmClosure(Transaction):
    """Settle a channel whose dispute window has passed."""

    alpha: int

    TAG = 0x14
    FIELDS = (("alpha", "u64"),)


@dataclass(frozen=True)
class SubmitFraudProof(Transaction):
    """Hand the fraud detector a request, its response and the header at the response height."""

    req_bytes: bytes
    res_bytes: bytes
    header_preimage: bytes

    TAG = 0x15
    FIELDS = (("req_bytes", "bytes"), ("res_bytes", "bytes"), ("header_preimage", "bytes"))


@dataclass(frozen=True)
class Transfer(Transaction):
    """Move tokens between accounts."""

    recipient: bytes
    amount: int

    TAG = 0x16
    FIELDS = (("recipient", "address"), ("amount", "u64"))


@dataclass(frozen=True)
class Payload(Transaction):
    """An opaque application transaction; it moves no tokens."""

    payload: bytes

    TAG = 0x17
    FIELDS = (("payload", "bytes"),)


TRANSACTION_TYPES = {
    kind.TAG: kind
    for kind in [Deposit, OpenChannel, CloseChannel, SubmitState, ConfirmClosure, SubmitFraudProof, Transfer, Payload]
}


def decode_transaction(data):
    """Decode a transaction from its canonical encoding."""
    reader = Reader(data)
    tag = reader.uint(1)
    kind = TRANSACTION_TYPES.get(tag)
    if kind is None:
        raise UnknownTransactionType(f"Unknown transaction tag 0x{tag:02x}.", tag=tag)
    values = {"sender": reader.take(ADDRESS_SIZE)}
    for name, field_kind in kind.FIELDS:
        if field_kind == "u64":
            values[name] = reader.u64()
        elif field_kind == "address":
            values[name] = reader.take(ADDRESS_SIZE)
        else:
            values[name] = reader.prefixed()
    reader.finish()
    return kind(**values)


@dataclass(frozen=True)
class Receipt:
    """Outcome of one transaction in a block."""

    tx_hash: bytes
    index: int
    kind: str
    accepted: bool
    error: str = None
    data: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Block:
    """A produced block: header, transactions, receipts and both tries."""

    header: BlockHeader
    transactions: tuple
    receipts: tuple
    state: Trie
    tx_trie: Trie

    @property
    def hash(self):
        """Return the block hash."""
        return self.header.hash

    @property
    def height(self):
        """Return the block height."""
        return self.header.height


def error_is_justified(call, result, max_tx_size):
    """Tell whether an error result is one anybody can confirm from the call alone."""
    if call.method == Method.GET_CHANNEL_STATUS:
        return True
    if call.method != Method.SEND_TRANSACTION or result != error_result("MalformedTransaction"):
        return False
    return not call.payload or len(call.payload) > max_tx_size


def proof_supports_result(call, result, proof_bytes, header):
    """
    Decide whether a response proof binds its result to the chain at header.

    Channel status answers carry no proof and always pass. Error results to the other methods never
    pass; callers that accept some of them check error_is_justified first. A balance must be the
    proven state-trie value under the queried address; a transaction hash must be the hash of a
    proven Payload carrying the submitted bytes.
    """
    if call.method == Method.GET_CHANNEL_STATUS:
        return True
    if is_error_result(call.method, result):
        return False
    try:
        proof = decode_proof(proof_bytes)
    except CodecError:
        return False
    if call.method == Method.GET_BALANCE:
        bound = proof.key == call.address and proof.value == result
        return bound and verify_proof(header.state_root, proof)
    try:
        transaction = decode_transaction(proof.value)
    except CodecError:
        return False
    bound = isinstance(transaction, Payload) and transaction.payload == call.payload and transaction.hash == result
    return bound and verify_proof(header.tx_root, proof)


class Chain:
    """Single-writer chain state: balances, deposits, channels and the block history."""

    def __init__(self, genesis_balances, config=None, emit=None):
        """Create the genesis block from the initial balances."""
        self.config = config or ParpConfig.from_settings()
        self.emit = emit
        self.logger = logging.getLogger("django")
        self.balances = dict(genesis_balances)
        self.deposits = {}
        self.channels = {}
        self.treasury = 0
        self.next_channel_id = 1
        self.mempool = []
        self.blocks = []
        self.hash_index = {}
        self._dirty = set()
        state = Trie()
        for address in sorted(self.balances):
            state = state.insert(address, u64(self.balances[address]))
        header = BlockHeader(bytes(DIGEST_SIZE), 0, state.root_hash(), EMPTY_ROOT, 0)
        self._append(Block(header, (), (), state, Trie()))
        self.supply = self.total_supply()

    def _emit(self, record):
        """Pass a chain event to the injected sink, if any."""
        if self.emit is not None:
            self.emit(record)

    def _append(self, block):
        """Add a block to the history and index its hash."""
        self.blocks.append(block)
        self.hash_index[block.hash] = block.height

    @property
    def tip(self):
        """Return the latest block."""
        return self.blocks[-1]

    @property
    def height(self):
        """Return the height of the latest block."""
        return self.tip.height

    @property
    def next_height(self):
        """Return the height of the block being produced; operations are judged against it."""
        return self.height + 1

    def total_supply(self):
        """Sum every token: balances, deposits, budgets locked in unsettled channels and the treasury."""
        locked = sum(chan.budget for chan in self.channels.values() if chan.status != ChannelStatus.CLOSED)
        return sum(self.balances.values()) + sum(self.deposits.values()) + locked + self.treasury

    def balance_of(self, address):
        """Return the spendable balance of an account."""
        return self.balances.get(address, 0)

    def _credit(self, address, amount):
        """Add to a balance."""
        self.balances[address] = self.balance_of(address) + amount
        self._dirty.add(address)

    def _debit(self, address, amount):
        """Take from a balance, rejecting overdrafts."""
        if self.balance_of(address) < amount:
            raise InsufficientBalance(
                f"Balance {self.balance_of(address)} cannot cover {amount}.",
                balance=self.balance_of(address),
                amount=amount,
            )
        self.balances[address] = self.balance_of(address) - amount
        self._dirty.add(address)

    def submit(self, transaction):
        """Queue a transaction for the next block."""
        self.mempool.append(transaction)
        return transaction.hash

    def produce_block(self, pending=None, timestamp=None):
        """Apply pending transactions in order, settle expired disputes and append the new header."""
        if pending is None:
            pending, self.mempool = self.mempool, []
        transactions = tuple(pending)
        height = self.next_height
        receipts = tuple(self._apply(index, transaction) for index, transaction in enumerate(transactions))
        for alpha in sorted(self.channels):
            channel = self.channels[alpha]
            if channel.status == ChannelStatus.CLOSING and channel.dispute_deadline < height:
                self.cmm_finalize(alpha)
        state = self.tip.state
        for address in sorted(self._dirty):
            state = state.insert(address, u64(self.balances[address]))
        self._dirty = set()
        tx_trie = Trie.from_items((tx_key(index), tx.encode()) for index, tx in enumerate(transactions))
        if timestamp is None:
            timestamp = height * self.config.block_interval
        header = BlockHeader(self.tip.hash, height, state.root_hash(), tx_trie.root_hash(), timestamp)
        block = Block(header, transactions, receipts, state, tx_trie)
        self._append(block)
        supply = self.total_supply()
        if supply != self.supply:
            raise ConservationViolation(f"Supply moved from {self.supply} to {supply} at height {height}.")
        self._emit({"type": "block", "height": height, "hash": block.hash, "txs": len(transactions)})
        return block

    def _apply(self, index, transaction):
        """Run one transaction and turn the outcome into a receipt."""
        try:
            data = self._dispatch(transaction) or {}
            receipt = Receipt(transaction.hash, index, transaction.kind, True, None, data)
        except ChainError as err:
            self.logger.warning(f"Rejected {transaction.kind} at height {self.next_height}: {err.code} {err.detail}")
            receipt = Receipt(transaction.hash, index, transaction.kind, False, err.code, err.as_record())
        self._emit(
            {
                "type": "tx",
                "height": self.next_height,
                "index": index,
                "kind": transaction.kind,
                "sender": transaction.sender,
                "accepted": receipt.accepted,
                "error": receipt.error,
            }
        )
        return receipt

    def _dispatch(self, tx):
        """Route a transaction to the module operation it invokes."""
        if isinstance(tx, Deposit):
            return self.fndm_deposit(tx.sender, tx.amount)
        if isinstance(tx, OpenChannel):
            return {"alpha": self.cmm_open_channel(tx.sender, tx.fn_addr, tx.expiry, tx.consent_sig, tx.budget)}
        if isinstance(tx, CloseChannel):
            return self.cmm_close_channel(tx.sender, tx.alpha, tx.a, tx.sigma_a)
        if isinstance(tx, SubmitState):
            return self.cmm_submit_state(tx.sender, tx.alpha, tx.a, tx.sigma_a)
        if isinstance(tx, ConfirmClosure):
            return self.cmm_finalize(tx.alpha)
        if isinstance(tx, SubmitFraudProof):
            return self.fdm_submit_fraud_proof(tx.sender, tx.req_bytes, tx.res_bytes, tx.header_preimage)
        if isinstance(tx, Transfer):
            return self.transfer(tx.sender, tx.recipient, tx.amount)
        return self.accept_payload(tx.payload)

    def transfer(self, sender, recipient, amount):
        """Move tokens between two accounts."""
        self._debit(sender, amount)
        self._credit(recipient, amount)

    def accept_payload(self, payload):
        """Check an application payload's size; it changes no balances."""
        if not payload or len(payload) > self.config.max_tx_size:
            raise MalformedTransaction(f"Payload of {len(payload)} bytes is not acceptable.")

    def fndm_deposit(self, sender, amount):
        """Move tokens from a node's balance into its deposit."""
        if amount < self.config.min_deposit:
            raise BelowMinimum(f"Deposit {amount} is below {self.config.min_deposit}.", amount=amount)
        self._debit(sender, amount)
        self.deposits[sender] = self.deposits.get(sender, 0) + amount
        self.logger.info(f"Deposit of {amount} from {sender.hex()}, now {self.deposits[sender]}.")
        return {"deposit": self.deposits[sender]}

    def cmm_open_channel(self, sender, fn_addr, expiry, consent_sig, budget):
        """Open a channel backed by the node's consent and lock the client's budget."""
        if not signed_by(consent_digest(sender, expiry), consent_sig, fn_addr):
            raise BadConsent("Consent does not recover to the full node.")
        if self.next_height > expiry:
            raise ConsentExpired(f"Consent expired at {expiry}, block is {self.next_height}.", expiry=expiry)
        if self.deposits.get(fn_addr, 0) < self.config.min_deposit:
            raise NodeNotDeposited(f"Node {fn_addr.hex()} has no eligible deposit.")
        if budget <= 0:
            raise InsufficientBalance("A channel needs a positive budget.", amount=budget)
        self._debit(sender, budget)
        alpha = self.next_channel_id
        self.next_channel_id += 1
        self.channels[alpha] = PaymentChannel(alpha, sender, fn_addr, budget)
        self.logger.info(f"Opened channel {alpha} between {sender.hex()} and {fn_addr.hex()} with budget {budget}.")
        return alpha

    def channel(self, alpha):
        """Return the channel record for alpha."""
        try:
            return self.channels[alpha]
        except KeyError as err:
            raise ChannelUnknown(f"No channel {alpha}.", alpha=alpha) from err

    def _live_channel(self, alpha):
        """Return a channel that is not settled yet."""
        channel = self.channel(alpha)
        if channel.status == ChannelStatus.CLOSED:
            raise ChannelClosed(f"Channel {alpha} is closed.", alpha=alpha)
        return channel

    def _check_payment(self, channel, a, sigma_a, allow_empty=False):
        """Validate a signed cumulative amount against the channel."""
        if a > channel.budget:
            raise OverBudget(f"Amount {a} exceeds budget {channel.budget}.", a=a, budget=channel.budget)
        if allow_empty and a == 0 and sigma_a == b"":
            return
        if not signed_by(payment_digest(channel.alpha, a), sigma_a, channel.lc):
            raise BadPaymentSig(f"Payment signature for {a} does not recover to the client.", a=a)

    def cmm_close_channel(self, sender, alpha, a, sigma_a):
        """Move an open channel into its dispute window with a signed state."""
        channel = self._live_channel(alpha)
        if channel.status == ChannelStatus.CLOSING:
            raise AlreadyClosing(f"Channel {alpha} is already closing.", alpha=alpha)
        if sender not in (channel.lc, channel.fn_addr):
            raise NotParticipant(f"{sender.hex()} is not part of channel {alpha}.", alpha=alpha)
        self._check_payment(channel, a, sigma_a, allow_empty=True)
        channel.status = ChannelStatus.CLOSING
        channel.cs_a, channel.cs_sigma = a, sigma_a
        channel.dispute_deadline = self.next_height + self.config.dispute_window
        self.logger.info(f"Channel {alpha} closing at a={a}, deadline {channel.dispute_deadline}.")
        return {"alpha": alpha, "a": a, "deadline": channel.dispute_deadline}

    def cmm_submit_state(self, sender, alpha, a, sigma_a):
        """Replace the recorded state with a higher amount and reset the deadline."""
        channel = self._live_channel(alpha)
        if channel.status != ChannelStatus.CLOSING:
            raise NotClosing(f"Channel {alpha} is not closing.", alpha=alpha)
        if sender not in (channel.lc, channel.fn_addr):
            raise NotParticipant(f"{sender.hex()} is not part of channel {alpha}.", alpha=alpha)
        if self.next_height > channel.dispute_deadline:
            raise DisputeWindowClosed(f"Deadline {channel.dispute_deadline} passed.", alpha=alpha)
        self._check_payment(channel, a, sigma_a)
        if a <= channel.cs_a:
            raise StaleState(f"Amount {a} does not beat recorded {channel.cs_a}.", a=a, recorded=channel.cs_a)
        channel.cs_a, channel.cs_sigma = a, sigma_a
        channel.dispute_deadline = self.next_height + self.config.dispute_window
        self.logger.info(f"Channel {alpha} state raised to a={a}, deadline reset to {channel.dispute_deadline}.")
        return {"alpha": alpha, "a": a, "deadline": channel.dispute_deadline}

    def cmm_finalize(self, alpha):
        """Pay the node its recorded amount, refund the rest to the client and close."""
        channel = self._live_channel(alpha)
        if channel.status != ChannelStatus.CLOSING:
            raise NotClosing(f"Channel {alpha} is not closing.", alpha=alpha)
        if self.next_height <= channel.dispute_deadline:
            raise DisputeWindowOpen(f"Deadline {channel.dispute_deadline} not reached.", alpha=alpha)
        refund = channel.budget - channel.cs_a
        self._credit(channel.fn_addr, channel.cs_a)
        self._credit(channel.lc, refund)
        channel.status = ChannelStatus.CLOSED
        self.logger.info(f"Channel {alpha} settled: node {channel.cs_a}, client {refund}.")
        settlement = {"alpha": alpha, "fn_amount": channel.cs_a, "lc_amount": refund}
        self._emit(
            {
                "type": "settlement",
                "height": self.next_height,
                "fn": channel.fn_addr,
                "lc": channel.lc,
                **settlement,
            }
        )
        return settlement

    def slash_and_reward(self, fn_addr, lc_addr, witness_addr):
        """Confiscate a node's whole deposit and split it between client, witness and treasury."""
        deposit = self.deposits.get(fn_addr, 0)
        if deposit <= 0:
            raise NothingToSlash(f"Node {fn_addr.hex()} has nothing left to slash.")
        fractions = self.config.split_fractions()
        client_share = int(deposit * fractions.get("client", 0))
        witness_share = int(deposit * fractions.get("witness", 0))
        treasury_share = deposit - client_share - witness_share
        self.deposits[fn_addr] = 0
        self._credit(lc_addr, client_share)
        self._credit(witness_addr, witness_share)
        self.treasury += treasury_share
        self.logger.info(f"Slashed {deposit} from {fn_addr.hex()}: {client_share}/{witness_share}/{treasury_share}.")
        return {"deposit": deposit, "client": client_share, "witness": witness_share, "treasury": treasury_share}

    def fdm_submit_fraud_proof(self, sender, req_bytes, res_bytes, header_preimage):
        """Adjudicate a fraud proof; on fraud the node is slashed and the channel force-closed."""
        try:
            request = decode_request(req_bytes)
            response = decode_response(res_bytes)
        except CodecError as err:
            raise MalformedEvidence(f"Evidence does not decode: {err.code}.") from err
        if request.alpha != response.alpha:
            raise IdentifierMismatch(f"Request names {request.alpha}, response {response.alpha}.")
        channel = self._live_channel(request.alpha)
        if request_digest(request) != request.h_req or not signed_by(request.h_req, request.sigma_req, channel.lc):
            raise RequestIntegrityFail("Request hash or signature does not belong to the client.")
        if not signed_by(response_digest(response), response.sigma_res, channel.fn_addr):
            raise OriginMismatch("Response was not signed by the channel's node.")
        if response.h_req != request.h_req:
            raise ResponseUnlinked("Response does not echo the request hash.")
        self._check_window(response.m_b)
        condition = self._fraud_condition(request, response, header_preimage)
        shares = self.slash_and_reward(channel.fn_addr, channel.lc, sender)
        self._force_close(channel, request)
        self.logger.info(f"Fraud proof accepted on channel {channel.alpha}: {condition}.")
        self._emit(
            {
                "type": "slash",
                "height": self.next_height,
                "alpha": channel.alpha,
                "fn": channel.fn_addr,
                "lc": channel.lc,
                "reporter": sender,
                "condition": condition,
                **shares,
            }
        )
        return {"alpha": channel.alpha, "condition": condition, **shares}

    def _fraud_condition(self, request, response, header_preimage):
        """Return the first fraud condition that holds, or reject the proof."""
        if request.a != response.a:
            return "PaymentMismatch"
        try:
            referenced = self.get_block_height_by_hash(request.h_b)
        except ChainError:
            referenced = None
        if referenced is not None and response.m_b < referenced:
            return "StaleHeight"
        try:
            header = decode_header(header_preimage)
        except CodecError as err:
            raise MalformedEvidence(f"Header preimage does not decode: {err.code}.") from err
        if header.height != response.m_b or header.hash != self.blocks[response.m_b].hash:
            raise HeaderMismatch(f"Header is not the recorded header at height {response.m_b}.")
        if self._honest_error(request.call, response.result, self.blocks[response.m_b]):
            raise ProofRejected("The error result is justified.")
        if not proof_supports_result(request.call, response.result, response.proof, header):
            return "BadProof"
        raise ProofRejected("No fraud condition holds.")

    def _honest_error(self, call, result, block):
        """Tell whether an error result was the right answer at block."""
        if not is_error_result(call.method, result):
            return False
        if error_is_justified(call, result, self.config.max_tx_size):
            return True
        if call.method != Method.GET_BALANCE or result != error_result("UnknownAccount"):
            return False
        try:
            block.state.get(call.address)
        except KeyAbsent:
            return True
        return False

    def _force_close(self, channel, request):
        """Put a defrauded channel into its dispute window at the larger provable amount."""
        if channel.cs_a < request.a <= channel.budget:
            if signed_by(payment_digest(channel.alpha, request.a), request.sigma_a, channel.lc):
                channel.cs_a, channel.cs_sigma = request.a, request.sigma_a
        channel.status = ChannelStatus.CLOSING
        channel.dispute_deadline = self.next_height + self.config.dispute_window

    def _check_window(self, height):
        """Require a height inside the hash window: at most hash_window - 1 blocks behind the tip."""
        if height > self.height or self.height - height > self.config.hash_window - 1:
            raise OutsideWindow(f"Height {height} is outside the window at tip {self.height}.", height=height)

    def get_block_height_by_hash(self, block_hash):
        """Return the height of a recent block hash."""
        height = self.hash_index.get(block_hash)
        if height is None:
            raise UnknownHash(f"Unknown block hash {block_hash.hex()}.")
        self._check_window(height)
        return height

    def header_at(self, height):
        """Return the header at a stored height."""
        return self.block_at(height).header

    def block_at(self, height):
        """Return the block at a stored height."""
        if not 0 <= height <= self.height:
            raise UnknownHeight(f"No block at height {height}.", height=height)
        return self.blocks[height]

    def state_at(self, height):
        """Return the state trie as of a stored height."""
        return self.block_at(height).state

    def get_root_hash(self, height):
        """Return the (state_root, tx_root) pair at a stored height."""
        header = self.header_at(height)
        return header.state_root, header.tx_root

    def quiescent(self):
        """Tell whether nothing is pending and every channel is settled."""
        settled = all(chan.status == ChannelStatus.CLOSED for chan in self.channels.values())
        return not self.mempool and settled
