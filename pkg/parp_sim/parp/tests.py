"""All unit tests for the parp app."""
from dataclasses import replace
from io import StringIO
from pathlib import Path
import json
import os
import random
import tempfile
from unittest.mock import patch
import black
import pycodestyle
import pydocstyle
from django.core.management import call_command
from django.core.management.base import CommandError
from django.db import DatabaseError
from django.test import TestCase
from django.urls import reverse
from hypothesis import given, settings as hypothesis_settings, strategies as st
from hypothesis.extra.django import TestCase as HypothesisTestCase
from hypothesis.stateful import RuleBasedStateMachine, invariant, rule

from .admin import rerun_scenarios
from .chain import (
    BadConsent,
    BelowMinimum,
    Chain,
    ChannelStatus,
    CloseChannel,
    ConsentExpired,
    Deposit,
    DisputeWindowClosed,
    InsufficientBalance,
    NodeNotDeposited,
    NotParticipant,
    OpenChannel,
    OutsideWindow,
    Payload,
    SubmitFraudProof,
    SubmitState,
    Transfer,
    UnknownHash,
    decode_transaction,
)
from .codec import (
    HEADER_SIZE,
    REQUEST_OVERHEAD,
    RESPONSE_OVERHEAD,
    BadLengthPrefix,
    CodecError,
    Method,
    ParpRequest,
    ParpResponse,
    RpcCall,
    TrailingBytes,
    Truncated,
    UnknownMethodTag,
    decode_header,
    decode_request,
    decode_response,
    encode_call,
    encode_header,
    encode_request,
    encode_response,
    error_result,
    request_preimage,
)
from .conf import ConfigError, ParpConfig
from .crypto import consent_digest, digest, keygen, payment_digest, recover, sign, signed_by
from .fullnode import (
    BadHash,
    BadSig,
    BehaviorPolicy,
    FullNode,
    InsufficientPayment,
    NodeError,
    OpenReceipt,
    OverBudget,
    RequestRejected,
    UnknownChannel,
)
from .lightclient import (
    LEGAL_TRANSITIONS,
    PROOF_MARGIN,
    HeaderFeed,
    IllegalTransition,
    LightClient,
    NotBonded,
    Outcome,
    Step,
)
from .metrics import MalformedTrace, build_report, discontinuities, proof_size_table, read_trace, render_text
from .models import ScenarioRun
from .runner import execute, execute_path, store
from .scenarios import BUNDLED_DIR, Scenario, ScenarioError, ScenarioNotFound, check_expectations, load_scenario
from .simnet import BoundsViolation, ScriptReferenceError, Simulation
from .trie import (
    EMPTY_ROOT,
    Branch,
    Extension,
    KeyAbsent,
    Leaf,
    MerkleProof,
    Trie,
    decode_proof,
    encode_node,
    encode_proof,
    to_nibbles,
    tx_key,
    verify_proof,
)

hypothesis_settings.register_profile("parp", deadline=None, max_examples=60)
hypothesis_settings.load_profile("parp")

U64_VALUES = st.integers(min_value=0, max_value=2**64 - 1)
DIGESTS = st.binary(min_size=32, max_size=32)
SIGNATURES = st.binary(min_size=65, max_size=65)
CALLS = st.one_of(
    st.binary(min_size=20, max_size=20).map(RpcCall.get_balance),
    st.binary(max_size=64).map(RpcCall.send_transaction),
    U64_VALUES.map(RpcCall.get_channel_status),
)
REQUESTS = st.builds(
    ParpRequest,
    alpha=U64_VALUES,
    h_b=DIGESTS,
    a=U64_VALUES,
    gamma=CALLS.map(encode_call),
    h_req=DIGESTS,
    sigma_a=SIGNATURES,
    sigma_req=SIGNATURES,
)
RESPONSES = st.builds(
    ParpResponse,
    alpha=U64_VALUES,
    m_b=U64_VALUES,
    a=U64_VALUES,
    result=st.binary(max_size=64),
    proof=st.binary(max_size=300),
    h_req=DIGESTS,
    sigma_req=SIGNATURES,
    sigma_res=SIGNATURES,
)


def reference_node(entries):
    """Build the canonical node for a non-empty dict of nibble paths, from scratch."""
    if len(entries) == 1:
        ((path, value),) = entries.items()
        return Leaf(path, value)
    shared = len(os.path.commonprefix(list(entries)))
    if shared:
        child = reference_node({path[shared:]: value for path, value in entries.items()})
        return Extension(next(iter(entries))[:shared], digest(encode_node(child)))
    children = [None] * 16
    for nibble in range(16):
        below = {path[1:]: value for path, value in entries.items() if path and path[0] == nibble}
        if below:
            children[nibble] = digest(encode_node(reference_node(below)))
    return Branch(tuple(children), entries.get(()))


def reference_root(pairs):
    """Return the root of the canonical trie holding a dict of byte keys."""
    if not pairs:
        return EMPTY_ROOT
    return digest(encode_node(reference_node({to_nibbles(key): value for key, value in pairs.items()})))


def random_bytes(rng, size):
    """Return size seeded random bytes."""
    return rng.getrandbits(size * 8).to_bytes(size, "big")


def flip_bit(data, rng):
    """Return data with one random bit flipped."""
    flipped = bytearray(data)
    bit = rng.randrange(len(flipped) * 8)
    flipped[bit // 8] ^= 1 << (bit % 8)
    return bytes(flipped)


def bundled(name):
    """Return the path of a bundled scenario."""
    return BUNDLED_DIR / f"{name}.json"


class ChannelFactory:
    """A chain with a deposited node, a witness node and a light client bonded to the first node."""

    def __init__(self, policy="Honest", budget=1000, seed=7, stale_close=False, **overrides):
        """Create the actors and walk the client through the handshake up to Bonded."""
        rng = random.Random(seed)
        self.config = ParpConfig.from_settings(**overrides)
        node_key, self.node_addr = keygen(rng)
        client_key, self.client_addr = keygen(rng)
        witness_key, self.witness_addr = keygen(rng)
        balances = {self.node_addr: 5000, self.client_addr: 2000, self.witness_addr: 5000}
        self.chain = Chain(balances, self.config)
        self.node = FullNode("fn1", node_key, self.chain, self.config, policy)
        self.witness = FullNode("fn2", witness_key, self.chain, self.config)
        feed = HeaderFeed(self.chain)
        self.client = LightClient(
            "lc1", client_key, self.config, feed, budget, witness=self.witness_addr, stale_close=stale_close
        )
        self.client.store_header(self.chain.tip.header)
        self.node.deposit_tx(self.config.min_deposit)
        self.block()
        handshake = self.client.start_handshake(self.node_addr, 0)
        opening = self.client.on_hsconfirm(self.node.handle_handshake(handshake.lc), 1)
        self.node.relay_open(opening)
        self.block()
        self.client.on_open_receipt(self.node.outbox.pop(0).message)
        self.now = 2

    def block(self):
        """Produce a block, show it to the node and the client and queue what the client submits."""
        block = self.chain.produce_block()
        self.node.on_block(block)
        for transaction in self.client.on_header(block.header).transactions:
            self.chain.submit(transaction)
        return block

    def exchange(self, call=None, probe=False):
        """Run one paid round; a submitted transaction is answered once its block exists."""
        call = call or RpcCall.get_balance(self.client_addr)
        self.now += 1
        request = self.client.liveness_probe() if probe else self.client.build_request(call)
        round_ = self.client.dispatch(request, self.now, probe)
        res_bytes = self.node.serve(round_.req_bytes)
        if res_bytes is None and self.node.pending:
            self.block()
            res_bytes = self.node.outbox.pop(0).message
        reaction = self.client.on_response(round_, res_bytes) if res_bytes is not None else None
        return round_, res_bytes, reaction

    def submit_fraud(self, req_bytes, res_bytes, header_preimage=b""):
        """Let the witness submit evidence and return the fraud proof's receipt."""
        self.chain.submit(SubmitFraudProof(self.witness_addr, req_bytes, res_bytes, header_preimage))
        block = self.block()
        return next(receipt for receipt in block.receipts if receipt.kind == "SubmitFraudProof")

    def signed_request(self, a, call=None, key=None):
        """Build a request by hand, signed by key (the client's own by default)."""
        key = key or self.client.private_key
        gamma = encode_call(call or RpcCall.get_balance(self.client_addr))
        h_b = self.chain.tip.hash
        h_req = digest(request_preimage(self.client.alpha, h_b, a, gamma))
        sigma_a = sign(payment_digest(self.client.alpha, a), key)
        return ParpRequest(self.client.alpha, h_b, a, gamma, h_req, sigma_a, sign(h_req, key))


class StylingAndFormattingTests(TestCase):
    """Tests for the style and formatting guidelines in play for this project."""

    def test_codestyle(self):
        """Ensure compliance with PEP-8 (pycodestyle) at 120 characters."""
        style = pycodestyle.StyleGuide(max_line_length=120)
        result = style.check_files(".")
        self.assertEqual(result.total_errors, 0, "Found PEP-8 errors, see above and fix.")

    def test_black(self):
        """Ensure that all files are compliant with Black formatting expectations."""
        res = black.main(["-l", "120", "--check", "."], standalone_mode=False)
        self.assertEqual(res, 0, "Found Black reformatting requirements, run 'black -l 120 .' to fix.")

    def test_docstyle(self):
        """Ensure compliance with PEP-257 (pydocstyle)."""
        to_check = []
        for root, _, files in os.walk("./parp"):
            if "migrations" in root:
                continue
            for this_file in files:
                fullpath = os.path.join(root, this_file)
                if all([this_file.endswith(".py"), os.stat(fullpath).st_size > 0]):
                    to_check.append(fullpath)
        errors = [str(error) for error in pydocstyle.check(to_check)]
        if errors:
            raise ValueError("\n".join(errors))


class ConfigTests(TestCase):
    """Tests for the PARP settings layer."""

    def test_defaults_from_settings(self):
        """Check the shipped parameters."""
        config = ParpConfig.from_settings()
        self.assertEqual(config.dispute_window, 16)
        self.assertEqual(config.hash_window, 256)
        self.assertEqual(config.fee_for("send_transaction"), 5)
        self.assertEqual(config.delay, (1, 2))

    def test_overrides_skip_none(self):
        """Explicit overrides win and None means keep the setting."""
        config = ParpConfig.from_settings(dispute_window=4, horizon=None)
        self.assertEqual(config.dispute_window, 4)
        self.assertEqual(config.horizon, 2000)

    def test_rejections(self):
        """Unknown keys, zero windows and over-generous splits are refused."""
        with self.assertRaises(ConfigError):
            ParpConfig.from_settings(bogus=1)
        with self.assertRaises(ConfigError):
            ParpConfig.from_settings(dispute_window=0)
        with self.assertRaises(ConfigError):
            ParpConfig.from_settings(reward_split={"client": "2/3", "witness": "1/2"})
        with self.assertRaises(ConfigError):
            ParpConfig.from_settings().fee_for("get_logs")


class CryptoTests(TestCase):
    """Tests for hashing and signatures."""

    def test_digest_golden_value(self):
        """The digest of the empty string is the keccak-256 constant."""
        self.assertEqual(digest(b"").hex(), "c5d2460186f7233c927e7db2dcc703c0e500b653ca82273b7bfad8045d85a470")

    def test_sign_and_recover(self):
        """A signature recovers to the signer's address and to nobody else."""
        rng = random.Random(1)
        key, address = keygen(rng)
        _, other = keygen(rng)
        message = digest(b"parp")
        signature = sign(message, key)
        self.assertEqual(len(signature), 65)
        self.assertEqual(recover(message, signature), address)
        self.assertTrue(signed_by(message, signature, address))
        self.assertFalse(signed_by(message, signature, other))
        self.assertFalse(signed_by(message, b"\x00" * 64, address))

    def test_keygen_is_seeded(self):
        """The same RNG seed gives the same keys."""
        self.assertEqual(keygen(random.Random(5))[1], keygen(random.Random(5))[1])
        self.assertNotEqual(keygen(random.Random(5))[1], keygen(random.Random(6))[1])

    def test_bit_flips_break_signatures(self):
        """Ensure flipping any single bit of the message or the signature breaks verification."""
        rng = random.Random(2)
        key, address = keygen(rng)
        message = digest(b"cumulative payment")
        signature = sign(message, key)
        for _ in range(1000):
            if rng.random() < 0.5:
                flipped = bytearray(message)
                bit = rng.randrange(len(flipped) * 8)
                flipped[bit // 8] ^= 1 << (bit % 8)
                self.assertFalse(signed_by(bytes(flipped), signature, address))
            else:
                flipped = bytearray(signature)
                bit = rng.randrange(len(flipped) * 8)
                flipped[bit // 8] ^= 1 << (bit % 8)
                self.assertFalse(signed_by(message, bytes(flipped), address))


class CodecTests(HypothesisTestCase):
    """Tests for the wire formats."""

    def setUp(self):
        """Build a channel to get well-formed messages from."""
        self.factory = ChannelFactory()
        self.req_bytes = encode_request(self.factory.signed_request(1))

    def test_sizes(self):
        """A balance request is 235 bytes: 210 bytes of metadata, the length prefix and a 21-byte call."""
        round_, res_bytes, _ = self.factory.exchange()
        request = round_.request
        self.assertEqual(REQUEST_OVERHEAD, 210)
        self.assertEqual(RESPONSE_OVERHEAD, 186)
        self.assertEqual(len(request.gamma), 21)
        self.assertEqual(len(round_.req_bytes), 235)
        response = decode_response(res_bytes)
        self.assertEqual(len(res_bytes), RESPONSE_OVERHEAD + 8 + len(response.result) + len(response.proof))
        self.assertEqual(len(encode_header(self.factory.chain.tip.header)), HEADER_SIZE)

    def test_request_decodes_to_itself(self):
        """Check that decoding the encoded request gives back the same fields."""
        round_, _, _ = self.factory.exchange()
        self.assertEqual(decode_request(round_.req_bytes), round_.request)
        self.assertEqual(encode_request(decode_request(round_.req_bytes)), round_.req_bytes)

    def test_header_decodes(self):
        """A header preimage decodes to the same header and hash."""
        header = self.factory.chain.tip.header
        self.assertEqual(decode_header(encode_header(header)).hash, header.hash)

    def test_structured_errors(self):
        """Ensure malformed bytes raise the specific codec error."""
        round_, _, _ = self.factory.exchange()
        data = round_.req_bytes
        with self.assertRaises(TrailingBytes):
            decode_request(data + b"\x00")
        with self.assertRaises(Truncated):
            decode_request(data[:-1])
        with self.assertRaises(BadLengthPrefix):
            decode_request(data[:48] + b"\xff\xff\xff\xff" + data[52:])
        bad_tag = bytearray(data)
        bad_tag[52] = 0x7F
        with self.assertRaises(UnknownMethodTag):
            decode_request(bytes(bad_tag))

    def test_transactions_decode(self):
        """Every transaction variant decodes from its canonical encoding."""
        sender = self.factory.client_addr
        for transaction in [
            Deposit(sender, 1000),
            Transfer(sender, self.factory.node_addr, 5),
            CloseChannel(sender, 1, 3, b"\x01" * 65),
            Payload(sender, b"opaque"),
        ]:
            self.assertEqual(decode_transaction(transaction.encode()), transaction)

    @given(st.binary(max_size=400))
    def test_fuzz_never_crashes(self, data):
        """Arbitrary bytes either decode or raise a CodecError."""
        for decoder in [decode_request, decode_response, decode_header, decode_proof, decode_transaction]:
            try:
                decoder(data)
            except CodecError:
                pass

    @given(st.integers(min_value=0, max_value=234), st.integers(min_value=0, max_value=255))
    def test_fuzz_mutated_requests(self, position, value):
        """A mutated request decodes to something or fails with a CodecError."""
        data = bytearray(self.req_bytes)
        data[position] = value
        try:
            decode_request(bytes(data))
        except CodecError:
            pass

    @given(REQUESTS)
    def test_random_requests_decode(self, request):
        """Any request with a well-formed call decodes to the same fields and call."""
        data = encode_request(request)
        self.assertEqual(len(data), REQUEST_OVERHEAD + len(request.gamma))
        self.assertEqual(decode_request(data), request)
        self.assertEqual(decode_request(data).call, request.call)

    @given(RESPONSES)
    def test_random_responses_decode(self, response):
        """Any response decodes to the same fields."""
        data = encode_response(response)
        self.assertEqual(len(data), RESPONSE_OVERHEAD + 8 + len(response.result) + len(response.proof))
        self.assertEqual(decode_response(data), response)


class TrieTests(HypothesisTestCase):
    """Tests for the Merkle-Patricia trie and its proofs."""

    @given(st.dictionaries(st.binary(min_size=1, max_size=6), st.binary(min_size=1, max_size=12), max_size=40))
    def test_matches_dict(self, pairs):
        """The trie behaves like a dict, and every key has a verifying proof."""
        trie = Trie.from_items(pairs.items())
        if not pairs:
            self.assertEqual(trie.root_hash(), EMPTY_ROOT)
        for key, value in pairs.items():
            self.assertEqual(trie.get(key), value)
            proof = trie.prove(key)
            self.assertTrue(verify_proof(trie.root_hash(), proof))
            self.assertEqual(decode_proof(encode_proof(proof)), proof)

    @given(st.lists(st.tuples(st.binary(min_size=1, max_size=4), st.binary(min_size=1, max_size=4)), max_size=30))
    def test_root_is_order_independent(self, pairs):
        """The root only depends on the final contents."""
        final = dict(pairs)
        forward = Trie.from_items(final.items())
        backward = Trie.from_items(reversed(list(final.items())))
        self.assertEqual(forward.root_hash(), backward.root_hash())

    @given(st.lists(st.tuples(st.binary(min_size=1, max_size=3), st.binary(min_size=1, max_size=6)), max_size=60))
    def test_root_matches_rebuild_after_each_insert(self, pairs):
        """After every insert the root equals one rebuilt from scratch over the contents so far."""
        trie = Trie()
        contents = {}
        for key, value in pairs:
            trie = trie.insert(key, value)
            contents[key] = value
            self.assertEqual(trie.root_hash(), reference_root(contents))

    def test_transaction_index_trie(self):
        """A 200-entry transaction-index trie has the rebuilt root and a verifying proof per index."""
        rng = random.Random(11)
        contents = {tx_key(index): random_bytes(rng, rng.randint(1, 90)) for index in range(200)}
        trie = Trie.from_items(contents.items())
        self.assertEqual(trie.root_hash(), reference_root(contents))
        for key, value in contents.items():
            proof = trie.prove(key)
            self.assertEqual(proof.value, value)
            self.assertTrue(verify_proof(trie.root_hash(), proof))

    def test_large_random_trie(self):
        """A 512-key trie of random addresses matches the rebuilt root and proves every key."""
        rng = random.Random(5)
        contents = {random_bytes(rng, 20): random_bytes(rng, 8) for _ in range(512)}
        trie = Trie.from_items(contents.items())
        self.assertEqual(len(list(trie.items())), 512)
        self.assertEqual(trie.root_hash(), reference_root(contents))
        for key, value in contents.items():
            self.assertEqual(trie.get(key), value)
            self.assertTrue(verify_proof(trie.root_hash(), trie.prove(key)))

    def test_single_bit_flips_break_proofs(self):
        """Ensure flipping one bit of the value, the root or any proof node makes verification fail."""
        rng = random.Random(3)
        trie = Trie.from_items((tx_key(index), random_bytes(rng, 40)) for index in range(300))
        root = trie.root_hash()
        for round_ in range(1000):
            proof = trie.prove(tx_key(rng.randrange(300)))
            self.assertTrue(verify_proof(root, proof))
            target = round_ % (len(proof.nodes) + 2)
            if target == 0:
                self.assertFalse(verify_proof(root, replace(proof, value=flip_bit(proof.value, rng))))
            elif target == 1:
                self.assertFalse(verify_proof(flip_bit(root, rng), proof))
            else:
                nodes = list(proof.nodes)
                nodes[target - 2] = flip_bit(nodes[target - 2], rng)
                self.assertFalse(verify_proof(root, replace(proof, nodes=tuple(nodes))))

    def test_versions_are_immutable(self):
        """Check that inserting returns a new version and the old root still proves the old value."""
        old = Trie.from_items([(b"\x01", b"a"), (b"\x02", b"b")])
        new = old.insert(b"\x01", b"c")
        self.assertNotEqual(old.root_hash(), new.root_hash())
        self.assertEqual(old.get(b"\x01"), b"a")
        self.assertTrue(verify_proof(old.root_hash(), old.prove(b"\x01")))
        self.assertFalse(verify_proof(new.root_hash(), old.prove(b"\x01")))

    def test_absent_and_tampered(self):
        """Absent keys raise and tampered proofs fail."""
        trie = Trie.from_items((tx_key(index), bytes([index]) * 8) for index in range(20))
        with self.assertRaises(KeyAbsent):
            trie.prove(tx_key(99))
        proof = trie.prove(tx_key(7))
        self.assertFalse(verify_proof(trie.root_hash(), MerkleProof(proof.nodes, proof.key, b"\x00" * 8)))
        self.assertFalse(verify_proof(trie.root_hash(), MerkleProof(proof.nodes[1:], proof.key, proof.value)))
        self.assertFalse(verify_proof(digest(b"other"), proof))
        self.assertFalse(verify_proof(trie.root_hash(), MerkleProof((b"\xff\x00",), proof.key, proof.value)))

    def test_proof_size_shape(self):
        """Proof sizes grow with the block and jump where the trie gets another level."""
        table = proof_size_table()
        self.assertLess(table[50]["mean"], table[400]["mean"])
        self.assertTrue(805 <= table[200]["mean"] <= 1495, table[200]["mean"])
        self.assertTrue(discontinuities(table[400]["sizes"]))
        self.assertEqual(len(table[300]["sizes"]), 300)


class ChainTests(TestCase):
    """Tests for the deposit module, the channels module and block production."""

    def setUp(self):
        """Build a bonded channel with an honest node."""
        self.factory = ChannelFactory()
        self.chain = self.factory.chain

    def receipt_of(self, transaction):
        """Submit one transaction and return its receipt."""
        self.chain.submit(transaction)
        return self.factory.block().receipts[-1]

    def test_genesis_and_heights(self):
        """Check that genesis sits at height 0 with the empty transaction root."""
        genesis = self.chain.block_at(0).header
        self.assertEqual(genesis.height, 0)
        self.assertEqual(genesis.tx_root, EMPTY_ROOT)
        self.assertEqual(genesis.parent_hash, bytes(32))
        self.assertEqual(self.chain.height, 2)
        self.assertEqual(self.chain.get_root_hash(2), (self.chain.tip.header.state_root, self.chain.tip.header.tx_root))

    def test_deposit_rules(self):
        """Ensure deposits reach the minimum and are covered by the balance."""
        with self.assertLogs("django", level="WARNING") as logs:
            self.assertEqual(self.receipt_of(Deposit(self.factory.node_addr, 10)).error, BelowMinimum.__name__)
        self.assertIn("BelowMinimum", logs.output[0])
        self.assertEqual(self.receipt_of(Deposit(self.factory.node_addr, 10**6)).error, InsufficientBalance.__name__)
        self.assertTrue(self.receipt_of(Deposit(self.factory.node_addr, 1000)).accepted)
        self.assertEqual(self.chain.deposits[self.factory.node_addr], 2000)

    def test_open_channel_rules(self):
        """Ensure opening needs a valid, unexpired consent from a deposited node."""
        stranger_key, stranger = keygen(random.Random(40))
        node_key, node = self.factory.node.private_key, self.factory.node_addr
        client = self.factory.client_addr
        expiry = self.chain.height + 5
        forged = sign(consent_digest(client, expiry), stranger_key)
        receipt = self.receipt_of(OpenChannel(client, node, expiry, forged, 10))
        self.assertEqual(receipt.error, BadConsent.__name__)
        receipt = self.receipt_of(OpenChannel(client, node, 1, sign(consent_digest(client, 1), node_key), 10))
        self.assertEqual(receipt.error, ConsentExpired.__name__)
        receipt = self.receipt_of(OpenChannel(client, stranger, expiry, forged, 10))
        self.assertEqual(receipt.error, NodeNotDeposited.__name__)
        receipt = self.receipt_of(OpenChannel(client, node, expiry, sign(consent_digest(client, expiry), node_key), 10))
        self.assertTrue(receipt.accepted)
        self.assertEqual(receipt.data["alpha"], 2)

    def test_close_and_settle(self):
        """A close opens the dispute window and settlement pays the recorded amount."""
        for _ in range(3):
            self.factory.exchange()
        alpha = self.factory.client.alpha
        node_before = self.chain.balance_of(self.factory.node_addr)
        self.assertTrue(self.receipt_of(self.factory.client.close()).accepted)
        channel = self.chain.channel(alpha)
        self.assertEqual(channel.status, ChannelStatus.CLOSING)
        self.assertEqual(channel.dispute_deadline, self.chain.height + 16)
        while channel.status != ChannelStatus.CLOSED:
            self.factory.block()
        self.assertEqual(self.chain.height, channel.dispute_deadline + 1)
        self.assertEqual(self.chain.balance_of(self.factory.node_addr), node_before + 3)
        self.assertEqual(self.chain.balance_of(self.factory.client_addr), 1000 + 997)
        self.assertEqual(self.chain.total_supply(), self.chain.supply)
        self.assertEqual(self.factory.client.step, Step.IDLE)

    def test_dispute_rules(self):
        """Only participants may raise the state, only upwards and only inside the window."""
        for _ in range(4):
            self.factory.exchange()
        alpha = self.factory.client.alpha
        first_a, first_sigma = self.factory.client.signed[0]
        self.assertTrue(self.receipt_of(CloseChannel(self.factory.client_addr, alpha, first_a, first_sigma)).accepted)
        stranger = keygen(random.Random(41))[1]
        receipt = self.receipt_of(SubmitState(stranger, alpha, 4, self.factory.client.sigma_a))
        self.assertEqual(receipt.error, NotParticipant.__name__)
        self.assertEqual(self.chain.channel(alpha).cs_a, 4)
        receipt = self.receipt_of(SubmitState(self.factory.client_addr, alpha, first_a, first_sigma))
        self.assertEqual(receipt.error, "StaleState")
        receipt = self.receipt_of(SubmitState(self.factory.client_addr, alpha, 2000, first_sigma))
        self.assertEqual(receipt.error, "OverBudget")

    def test_dispute_after_deadline(self):
        """A state submitted after the deadline is refused and the close settles."""
        self.factory.exchange()
        self.factory.exchange()
        alpha = self.factory.client.alpha
        self.factory.node.initiate_close(alpha)
        self.chain.produce_block()
        deadline = self.chain.channel(alpha).dispute_deadline
        while self.chain.next_height <= deadline:
            self.chain.produce_block()
        self.chain.submit(SubmitState(self.factory.client_addr, alpha, 2, self.factory.client.sigma_a))
        block = self.chain.produce_block()
        self.assertEqual(block.receipts[0].error, DisputeWindowClosed.__name__)
        self.assertEqual(self.chain.channel(alpha).status, ChannelStatus.CLOSED)
        self.assertEqual(self.chain.channel(alpha).cs_a, 2)

    def test_hash_window(self):
        """Check that hashes up to 255 blocks old resolve; older ones are outside the window."""
        for _ in range(300):
            self.chain.produce_block()
        tip = self.chain.height
        self.assertEqual(self.chain.get_block_height_by_hash(self.chain.blocks[tip - 255].hash), tip - 255)
        with self.assertRaises(OutsideWindow):
            self.chain.get_block_height_by_hash(self.chain.blocks[tip - 256].hash)
        with self.assertRaises(UnknownHash):
            self.chain.get_block_height_by_hash(digest(b"nowhere"))

    def test_conservation_under_random_load(self):
        """Ten thousand random transfers and deposits never create or destroy tokens."""
        rng = random.Random(3)
        addresses = [keygen(rng)[1] for _ in range(6)]
        chain = Chain({address: 10_000 for address in addresses})
        for _ in range(100):
            for _ in range(100):
                sender, recipient = rng.choice(addresses), rng.choice(addresses)
                if rng.random() < 0.05:
                    chain.submit(Deposit(sender, rng.randint(500, 2000)))
                else:
                    chain.submit(Transfer(sender, recipient, rng.randint(0, 3000)))
            chain.produce_block()
            self.assertEqual(chain.total_supply(), 60_000)
        for address in addresses:
            self.assertEqual(chain.state_at(chain.height).get(address), chain.balance_of(address).to_bytes(8, "big"))


class FullNodeTests(TestCase):
    """Tests for the node's request checks and policies."""

    def setUp(self):
        """Build a bonded channel with an honest node."""
        self.factory = ChannelFactory()
        self.node = self.factory.node

    def test_request_checks(self):
        """Each failed check raises its own rejection."""
        self.factory.exchange()
        good = self.factory.signed_request(2)
        with self.assertRaises(InsufficientPayment):
            self.node.serve(encode_request(self.factory.signed_request(1)))
        with self.assertRaises(OverBudget):
            self.node.serve(encode_request(self.factory.signed_request(5000)))
        forger = keygen(random.Random(9))[0]
        with self.assertRaises(BadSig):
            self.node.serve(encode_request(self.factory.signed_request(2, key=forger)))
        with self.assertRaises(BadHash):
            self.node.serve(encode_request(replace(good, h_req=digest(b"x"))))
        with self.assertRaises(UnknownChannel):
            self.node.serve(encode_request(replace(good, alpha=99)))
        self.assertIsNotNone(self.node.serve(encode_request(good)))

    def test_duplicate_request_gets_cached_answer(self):
        """A retransmitted request returns the identical response."""
        round_, res_bytes, _ = self.factory.exchange()
        self.assertEqual(self.node.serve(round_.req_bytes), res_bytes)

    def test_lapsed_consents_are_dropped(self):
        """A consent stays until the block at its expiry, after which it could no longer open a channel."""
        stranger = keygen(random.Random(21))[1]
        confirm = self.node.handle_handshake(stranger)
        consent = (bytes(stranger), confirm.expiry)
        while self.factory.chain.height < confirm.expiry - 1:
            self.factory.block()
            self.assertIn(consent, self.node.consents)
        self.factory.block()
        self.assertNotIn(consent, self.node.consents)

    def test_settled_channel_leaves_the_cache(self):
        """Ensure the cached responses of a channel are dropped once it settles."""
        self.factory.exchange()
        alpha = self.factory.client.alpha
        self.assertIn(alpha, self.node.cache)
        self.factory.chain.submit(self.factory.client.close())
        while self.factory.chain.channel(alpha).status != ChannelStatus.CLOSED:
            self.factory.block()
            if self.factory.chain.channel(alpha).status != ChannelStatus.CLOSED:
                self.assertIn(alpha, self.node.cache)
        self.assertNotIn(alpha, self.node.cache)

    def test_policy_parsing(self):
        """Check that policies come from names or dicts with parameters."""
        self.assertEqual(str(BehaviorPolicy.parse("WrongAmount")), "WrongAmount")
        self.assertEqual(BehaviorPolicy.parse({"kind": "StaleHeight", "lag": 9}).lag, 9)
        with self.assertRaises(NodeError):
            BehaviorPolicy.parse("Sloppy")

    def test_stale_close_is_disputed_by_honest_node(self):
        """A client closing with an old amount loses to the node's latest state."""
        factory = ChannelFactory(stale_close=True)
        for _ in range(5):
            factory.exchange()
        factory.chain.submit(factory.client.close())
        factory.block()
        factory.block()
        channel = factory.chain.channel(factory.client.alpha)
        self.assertEqual(channel.cs_a, 5)
        while channel.status != ChannelStatus.CLOSED:
            factory.block()
        self.assertEqual(factory.chain.balance_of(factory.client_addr), 1000 + 995)

    def test_node_stale_close_is_disputed_by_client(self):
        """A node closing on purpose with an old amount loses to the client's latest state, which resets the window."""
        factory = ChannelFactory()
        for _ in range(5):
            factory.exchange()
        alpha = factory.client.alpha
        factory.node.initiate_close(alpha, stale=True)
        factory.block()
        channel = factory.chain.channel(alpha)
        first_deadline = channel.dispute_deadline
        self.assertEqual(channel.cs_a, 1)
        factory.client.on_close_notice(factory.node.outbox.pop(0).message)
        self.assertEqual(factory.client.step, Step.UNBONDING)
        factory.block()
        factory.block()
        self.assertEqual(channel.cs_a, 5)
        self.assertGreater(channel.dispute_deadline, first_deadline)
        while channel.status != ChannelStatus.CLOSED:
            factory.block()
        self.assertEqual(factory.chain.balance_of(factory.node_addr), 4000 + 5)


class LightClientTests(HypothesisTestCase):
    """Tests for verdicts, the lifecycle and fraud proofs."""

    def test_honest_calls_are_valid(self):
        """Balance, transaction and status calls against an honest node are all Valid."""
        factory = ChannelFactory()
        calls = [
            RpcCall.get_balance(factory.client_addr),
            RpcCall.send_transaction(b"hello chain"),
            RpcCall.get_channel_status(factory.client.alpha),
            RpcCall.get_balance(digest(b"nobody")[:20]),
        ]
        for call in calls:
            round_, _, reaction = factory.exchange(call)
            self.assertEqual(str(reaction.verdict), "Valid", call)
            self.assertEqual(round_.verdict.outcome, Outcome.VALID)
        self.assertEqual(factory.client.a, 1 + 5 + 0 + 1)

    def test_lifecycle_transitions(self):
        """Only the lifecycle's own transitions are allowed."""
        factory = ChannelFactory()
        client = factory.client
        self.assertEqual(client.step, Step.BONDED)
        with self.assertRaises(IllegalTransition):
            client.start_handshake(factory.node_addr, 10)
        client.close()
        self.assertEqual(client.step, Step.UNBONDING)
        with self.assertRaises(NotBonded):
            client.build_request(RpcCall.get_balance(factory.client_addr))

    @given(st.lists(st.sampled_from(list(Step)), max_size=12))
    def test_random_transition_sequences(self, steps):
        """Random transition attempts never leave the lifecycle graph."""
        factory = ChannelFactory()
        client = factory.client
        legal = {
            Step.IDLE: {Step.HANDSHAKING},
            Step.HANDSHAKING: {Step.UNBONDED, Step.IDLE},
            Step.UNBONDED: {Step.BONDED, Step.IDLE},
            Step.BONDED: {Step.UNBONDING},
            Step.UNBONDING: {Step.IDLE},
        }
        for step in steps:
            before = client.step
            try:
                client._transition(step)  # pylint: disable=W0212
            except IllegalTransition:
                self.assertNotIn(step, legal[before])
                self.assertEqual(client.step, before)
            else:
                self.assertIn(step, legal[before])

    def test_random_event_orderings(self):
        """Ten thousand random events never force an illegal transition or lower the paid amount."""
        rng = random.Random(21)
        factory = ChannelFactory()
        client, node, chain = factory.client, factory.node, factory.chain
        records = []
        client.emit = records.append
        handshake = opening = None
        waiting = []
        last = (client.alpha, client.a)
        events = ["block", "block", "call", "call", "probe", "handshake", "confirm", "open", "deliver", "close"]
        events.append("timeout")
        for now in range(3, 10_003):
            event = rng.choice(events)
            if event == "block":
                factory.block()
            elif event in ("call", "probe") and client.step == Step.BONDED and not client.halted:
                if client.a >= client.budget:
                    continue
                probe = event == "probe"
                call = RpcCall.get_channel_status(client.alpha) if probe else RpcCall.get_balance(client.address)
                round_ = client.dispatch(client.build_request(call), now, probe)
                try:
                    res_bytes = node.serve(round_.req_bytes)
                except RequestRejected:
                    res_bytes = None
                if res_bytes is None:
                    waiting.append(round_)
                else:
                    for transaction in client.on_response(round_, res_bytes).transactions:
                        chain.submit(transaction)
            elif event == "handshake" and client.step == Step.IDLE:
                handshake = client.start_handshake(node.address, now)
            elif event == "confirm" and handshake is not None:
                opening = client.on_hsconfirm(node.handle_handshake(handshake.lc), now)
                handshake = None
            elif event == "open" and opening is not None:
                node.relay_open(opening)
                opening = None
            elif event == "deliver" and node.outbox:
                message = node.outbox.pop(0).message
                if isinstance(message, OpenReceipt):
                    client.on_open_receipt(message)
                else:
                    client.on_close_notice(message)
            elif event == "close" and client.step == Step.BONDED:
                if rng.random() < 0.5:
                    chain.submit(client.close())
                else:
                    node.initiate_close(client.alpha, stale=rng.random() < 0.5)
            elif event == "timeout":
                client.on_handshake_timeout(now)
                client.on_open_timeout(now)
                for round_ in waiting:
                    for transaction in client.on_request_timeout(round_).transactions:
                        chain.submit(transaction)
                waiting = []
            if client.alpha is not None and client.alpha == last[0]:
                self.assertGreaterEqual(client.a, last[1])
            last = (client.alpha, client.a)
        transitions = [record for record in records if record["type"] == "transition"]
        for before, after in zip(transitions, transitions[1:]):
            self.assertEqual(before["to"], after["from"])
        for record in transitions:
            self.assertIn(Step(record["to"]), LEGAL_TRANSITIONS[Step(record["from"])])
        self.assertTrue(client.sessions)
        self.assertEqual(chain.total_supply(), chain.supply)

    def test_misbehavior_verdicts(self):
        """Each misbehaving policy produces its verdict."""
        expected = {
            "WrongAmount": "Fraudulent:PaymentMismatch",
            "BogusProof": "Fraudulent:BadProof",
            "BadResponseSig": "Invalid:BadResponseSignature",
            "WrongChannelId": "Invalid:ChannelMismatch",
            "WrongRequestHash": "Invalid:RequestHashMismatch",
        }
        for policy, verdict in expected.items():
            factory = ChannelFactory(policy)
            _, _, reaction = factory.exchange()
            self.assertEqual(str(reaction.verdict), verdict, policy)

    def test_stale_height_verdict(self):
        """A response older than the referenced block is Fraudulent:StaleHeight."""
        factory = ChannelFactory({"kind": "StaleHeight", "lag": 5})
        for _ in range(6):
            factory.block()
        _, res_bytes, reaction = factory.exchange()
        self.assertEqual(str(reaction.verdict), "Fraudulent:StaleHeight")
        self.assertEqual(decode_response(res_bytes).m_b, factory.chain.height - 5)

    def test_response_height_outside_window(self):
        """A response height ahead of the tip, or too old to leave room for a fraud proof, is refused unpaid."""
        for lag, blocks in [(300, 320), (-3, 0), (256 - PROOF_MARGIN, 260)]:
            factory = ChannelFactory({"kind": "StaleHeight", "lag": lag})
            for _ in range(blocks):
                factory.block()
            _, _, reaction = factory.exchange()
            self.assertEqual(str(reaction.verdict), "Invalid:ResponseOutsideWindow", lag)
            self.assertIsNone(reaction.fraud_proof)
            self.assertIsInstance(reaction.transactions[0], CloseChannel)

    def test_oldest_accepted_height_is_still_provable(self):
        """A stale response at the oldest height the client accepts still gets its node slashed."""
        factory = ChannelFactory({"kind": "StaleHeight", "lag": 255 - PROOF_MARGIN})
        for _ in range(250):
            factory.block()
        _, res_bytes, reaction = factory.exchange()
        self.assertEqual(factory.chain.height - decode_response(res_bytes).m_b, 255 - PROOF_MARGIN)
        self.assertEqual(str(reaction.verdict), "Fraudulent:StaleHeight")
        factory.witness.forward_fraud_proof(reaction.fraud_proof)
        block = factory.block()
        receipt = next(receipt for receipt in block.receipts if receipt.kind == "SubmitFraudProof")
        self.assertTrue(receipt.accepted, receipt.error)
        self.assertEqual(receipt.data["condition"], "StaleHeight")

    def test_request_hash_mismatch_retries_once(self):
        """The first mismatch triggers a resend; the second closes the channel."""
        factory = ChannelFactory("WrongRequestHash")
        round_, _, reaction = factory.exchange()
        self.assertEqual(reaction.resend, round_.req_bytes)
        second = factory.client.on_response(round_, factory.node.serve(reaction.resend))
        self.assertIsNone(second.resend)
        self.assertIsInstance(second.transactions[0], CloseChannel)
        self.assertEqual(factory.client.step, Step.UNBONDING)

    def test_unresponsive_node_times_out(self):
        """An unanswered request times out and the client closes with its last signed amount."""
        factory = ChannelFactory("Unresponsive")
        round_, res_bytes, reaction = factory.exchange()
        self.assertIsNone(res_bytes)
        self.assertIsNone(reaction)
        closing = factory.client.on_request_timeout(round_).transactions
        self.assertEqual(closing[0].a, 1)
        self.assertTrue(round_.timed_out)

    def test_status_check_catches_silent_stale_close(self):
        """A periodic status request answered Open while the chain shows Closing triggers a dispute."""
        factory = ChannelFactory("StaleStateClose")
        for _ in range(5):
            factory.exchange()
        factory.node.initiate_close(factory.client.alpha)
        self.assertEqual(factory.node.outbox, [])
        factory.block()
        round_, res_bytes, reaction = factory.exchange(probe=True)
        self.assertEqual(round_.request.a, 5)
        self.assertEqual(decode_response(res_bytes).result, bytes([ChannelStatus.OPEN]))
        self.assertEqual(str(reaction.verdict), "Valid")
        self.assertIsInstance(reaction.transactions[0], SubmitState)
        self.assertEqual(reaction.transactions[0].a, 5)
        self.assertEqual(factory.client.step, Step.UNBONDING)

    def test_header_store_is_bounded(self):
        """The header store keeps the newest headers only."""
        factory = ChannelFactory(header_store_size=10)
        for _ in range(30):
            factory.block()
        self.assertEqual(len(factory.client.headers), 10)
        self.assertEqual(factory.client.tip.height, factory.chain.height)


class FraudDetectorTests(TestCase):
    """Tests for fraud proof adjudication."""

    def fraud_receipt(self, policy):
        """Run one round against a misbehaving node and submit the client's fraud proof."""
        factory = ChannelFactory(policy)
        if isinstance(policy, dict) and policy.get("kind") == "StaleHeight":
            for _ in range(6):
                factory.block()
        _, _, reaction = factory.exchange()
        factory.witness.forward_fraud_proof(reaction.fraud_proof)
        block = factory.block()
        return factory, next(receipt for receipt in block.receipts if receipt.kind == "SubmitFraudProof")

    def test_provable_frauds_are_slashed(self):
        """Each provable condition slashes the whole deposit and splits it three ways."""
        for policy, condition in [
            ("WrongAmount", "PaymentMismatch"),
            ("BogusProof", "BadProof"),
            ({"kind": "StaleHeight", "lag": 5}, "StaleHeight"),
        ]:
            factory, receipt = self.fraud_receipt(policy)
            self.assertTrue(receipt.accepted, receipt.error)
            self.assertEqual(receipt.data["condition"], condition)
            self.assertEqual([receipt.data[key] for key in ("client", "witness", "treasury")], [333, 333, 334])
            self.assertEqual(factory.chain.deposits[factory.node_addr], 0)
            self.assertEqual(factory.chain.treasury, 334)
            self.assertEqual(factory.chain.channel(factory.client.alpha).status, ChannelStatus.CLOSING)
            self.assertEqual(factory.chain.total_supply(), factory.chain.supply)

    def test_second_proof_finds_nothing_to_slash(self):
        """A drained deposit cannot be slashed twice."""
        factory, _ = self.fraud_receipt("WrongAmount")
        round_ = factory.client.rounds[0]
        receipt = factory.submit_fraud(round_.req_bytes, round_.res_bytes)
        self.assertEqual(receipt.error, "NothingToSlash")

    def test_unprovable_evidence_is_rejected(self):
        """Invalid-but-unprovable responses are refused with the matching reason."""
        for policy, error in [
            ("BadResponseSig", "OriginMismatch"),
            ("WrongChannelId", "IdentifierMismatch"),
            ("WrongRequestHash", "ResponseUnlinked"),
        ]:
            factory = ChannelFactory(policy)
            round_, res_bytes, _ = factory.exchange()
            self.assertEqual(factory.submit_fraud(round_.req_bytes, res_bytes).error, error, policy)
            self.assertEqual(factory.chain.deposits[factory.node_addr], 1000)

    def test_malformed_evidence(self):
        """Ensure bytes that do not decode are rejected before anything else."""
        factory = ChannelFactory()
        self.assertEqual(factory.submit_fraud(b"junk", b"junk").error, "MalformedEvidence")

    def test_forged_request_is_rejected(self):
        """Evidence whose request the client never signed is refused."""
        factory = ChannelFactory("WrongAmount")
        forger = keygen(random.Random(12))[0]
        request = factory.signed_request(1, key=forger)
        res_bytes = factory.node._respond(request, factory.chain.height, b"\x00" * 8, b"")  # pylint: disable=W0212
        self.assertEqual(factory.submit_fraud(encode_request(request), res_bytes).error, "RequestIntegrityFail")

    def test_honest_rounds_are_never_fraud(self):
        """A thousand honest rounds over every method are Valid and samples of each cannot be turned into a slash."""
        factory = ChannelFactory(budget=2000)
        client = factory.client
        checked = set()
        for index in range(1000):
            call = [
                RpcCall.get_balance(factory.client_addr),
                RpcCall.get_channel_status(client.alpha),
                RpcCall.send_transaction(b"payload-%d" % index),
                RpcCall.get_balance(factory.node_addr),
            ][index % 4]
            round_, res_bytes, reaction = factory.exchange(call)
            self.assertEqual(reaction.verdict.outcome, Outcome.VALID, index)
            if index % 50 < 4:
                header = encode_header(factory.chain.header_at(decode_response(res_bytes).m_b))
                receipt = factory.submit_fraud(round_.req_bytes, res_bytes, header)
                self.assertEqual(receipt.error, "ProofRejected", index)
                checked.add(call.method)
        self.assertEqual(checked, set(Method))
        self.assertEqual(factory.chain.deposits[factory.node_addr], 1000)

    def test_evidence_at_the_window_edges(self):
        """Evidence 255 blocks behind the tip is adjudicated; 256 or more blocks behind is refused."""
        for age, error in [(255, None), (256, "OutsideWindow"), (257, "OutsideWindow"), (300, "OutsideWindow")]:
            factory = ChannelFactory("WrongAmount")
            round_, res_bytes, _ = factory.exchange()
            for _ in range(age):
                factory.chain.produce_block()
            self.assertEqual(factory.chain.height - decode_response(res_bytes).m_b, age)
            receipt = factory.submit_fraud(round_.req_bytes, res_bytes)
            self.assertEqual(receipt.error, error, age)
            self.assertEqual(factory.chain.deposits[factory.node_addr], 1000 if error else 0, age)
            if error is None:
                self.assertEqual(receipt.data["condition"], "PaymentMismatch")

    def test_evidence_from_the_future(self):
        """A response height above the tip is refused."""
        factory = ChannelFactory({"kind": "StaleHeight", "lag": -3})
        round_, res_bytes, _ = factory.exchange()
        self.assertEqual(factory.submit_fraud(round_.req_bytes, res_bytes).error, "OutsideWindow")

    def forged_error(self, factory, call, result):
        """Have the node sign an error result without running the call; return the round, response and reaction."""
        client = factory.client
        factory.now += 1
        round_ = client.dispatch(client.build_request(call), factory.now)
        res_bytes = factory.node._respond(round_.request, factory.chain.height, result, b"")  # pylint: disable=W0212
        return round_, res_bytes, client.on_response(round_, res_bytes)

    def test_unknown_account_claim_for_funded_account(self):
        """A node claiming a funded account does not exist is not paid and is slashed on the block state."""
        factory = ChannelFactory()
        round_, res_bytes, reaction = self.forged_error(
            factory, RpcCall.get_balance(factory.client_addr), error_result("UnknownAccount")
        )
        self.assertEqual(str(reaction.verdict), "Invalid:UnprovenError")
        header = encode_header(factory.chain.header_at(decode_response(res_bytes).m_b))
        receipt = factory.submit_fraud(round_.req_bytes, res_bytes, header)
        self.assertTrue(receipt.accepted, receipt.error)
        self.assertEqual(receipt.data["condition"], "BadProof")

    def test_unknown_account_claim_for_absent_account(self):
        """A truthful unknown-account answer is not accepted by the client and cannot be slashed."""
        factory = ChannelFactory()
        stranger = keygen(random.Random(21))[1]
        round_, res_bytes, reaction = factory.exchange(RpcCall.get_balance(stranger))
        self.assertEqual(decode_response(res_bytes).result, error_result("UnknownAccount"))
        self.assertEqual(str(reaction.verdict), "Invalid:UnprovenError")
        header = encode_header(factory.chain.header_at(decode_response(res_bytes).m_b))
        self.assertEqual(factory.submit_fraud(round_.req_bytes, res_bytes, header).error, "ProofRejected")
        self.assertEqual(factory.chain.deposits[factory.node_addr], 1000)

    def test_malformed_transaction_answers(self):
        """Ensure rejecting an empty payload is Valid and unslashable while rejecting a well-formed one is fraud."""
        factory = ChannelFactory()
        round_, res_bytes, reaction = factory.exchange(RpcCall.send_transaction(b""))
        self.assertEqual(decode_response(res_bytes).result, error_result("MalformedTransaction"))
        self.assertEqual(str(reaction.verdict), "Valid")
        header = encode_header(factory.chain.header_at(decode_response(res_bytes).m_b))
        self.assertEqual(factory.submit_fraud(round_.req_bytes, res_bytes, header).error, "ProofRejected")
        _, _, reaction = self.forged_error(
            factory, RpcCall.send_transaction(b"well-formed"), error_result("MalformedTransaction")
        )
        self.assertEqual(str(reaction.verdict), "Fraudulent:BadProof")
        factory.witness.forward_fraud_proof(reaction.fraud_proof)
        block = factory.block()
        receipt = next(receipt for receipt in block.receipts if receipt.kind == "SubmitFraudProof")
        self.assertTrue(receipt.accepted, receipt.error)
        self.assertEqual(receipt.data["condition"], "BadProof")


class ChannelMachine(RuleBasedStateMachine):
    """Random closes, disputes and idle blocks on one channel."""

    def __init__(self):
        """Open a channel with a 100 token budget and a short dispute window."""
        super().__init__()
        rng = random.Random(11)
        self.client_key, self.client = keygen(rng)
        node_key, self.node = keygen(rng)
        self.chain = Chain({self.client: 5000, self.node: 5000}, ParpConfig(dispute_window=4))
        self.chain.submit(Deposit(self.node, 1000))
        self.chain.produce_block()
        consent = sign(consent_digest(self.client, 50), node_key)
        self.chain.submit(OpenChannel(self.client, self.node, 50, consent, 100))
        self.chain.produce_block()
        self.recorded = 0

    def signed(self, a):
        """Sign a cumulative amount on channel 1."""
        return sign(payment_digest(1, a), self.client_key)

    @rule(a=st.integers(min_value=0, max_value=150), by_node=st.booleans())
    def close(self, a, by_node):
        """Try to close with some amount."""
        sender = self.node if by_node else self.client
        self.chain.submit(CloseChannel(sender, 1, a, self.signed(a)))
        self.chain.produce_block()

    @rule(a=st.integers(min_value=0, max_value=150))
    def dispute(self, a):
        """Try to raise the recorded amount."""
        self.chain.submit(SubmitState(self.client, 1, a, self.signed(a)))
        self.chain.produce_block()

    @rule()
    def idle(self):
        """Produce an empty block."""
        self.chain.produce_block()

    @invariant()
    def supply_is_conserved(self):
        """Ensure tokens are neither created nor destroyed."""
        assert self.chain.total_supply() == self.chain.supply

    @invariant()
    def recorded_amount_never_drops(self):
        """Check the recorded amount only grows and stays within the budget."""
        channel = self.chain.channel(1)
        assert self.recorded <= channel.cs_a <= channel.budget
        self.recorded = channel.cs_a


ChannelMachineTest = ChannelMachine.TestCase
ChannelMachineTest.settings = hypothesis_settings(max_examples=20, stateful_step_count=15, deadline=None)


class ScenarioTests(TestCase):
    """Tests for scenario loading and expectation checks."""

    def test_bundled_scenarios_load(self):
        """Every bundled scenario validates."""
        paths = sorted(BUNDLED_DIR.glob("*.json"))
        self.assertGreaterEqual(len(paths), 15)
        for path in paths:
            self.assertEqual(load_scenario(path).name, path.stem)

    def test_schema_errors(self):
        """Unknown keys, missing names and unknown actions are refused."""
        with self.assertRaises(ScenarioError):
            Scenario.from_dict({"name": "x", "colour": "blue"})
        with self.assertRaises(ScenarioError):
            Scenario.from_dict({"seed": 1})
        with self.assertRaises(ScenarioError):
            Scenario.from_dict({"name": "x", "script": [{"action": "dance"}]})
        with self.assertRaises(ScenarioNotFound):
            load_scenario("/nonexistent/scenario.json")

    def test_check_expectations(self):
        """Verdict keys match refinements and every mismatch is reported."""
        report = {
            "conserved": True,
            "verdicts": {"Valid": 3, "Invalid:ChannelMismatch": 1},
            "slashes": [],
            "onchain": {},
            "settlements": [{"fn": "fn1", "fn_amount": 3}],
            "final_steps": {"lc1": "IDLE"},
        }
        met = {"verdicts": {"Invalid": 1}, "settlements": [{"fn_amount": 3}]}
        self.assertEqual(check_expectations(report, met), [])
        unmet = {"verdicts": {"Valid": 2}, "fraud_accepted": 1, "final_steps": {"lc1": "Bonded"}}
        self.assertEqual(len(check_expectations(report, unmet)), 3)


class SimulationTests(TestCase):
    """Tests for the deterministic simulator."""

    def test_same_seed_same_trace(self):
        """Two runs of one scenario and seed produce byte-identical traces."""
        scenario = load_scenario(bundled("honest"))
        first = Simulation(scenario, scenario.config()).run()
        second = Simulation(scenario, scenario.config()).run()
        self.assertEqual(first.dumps(), second.dumps())
        other = execute(scenario, seed=99)
        self.assertNotEqual(other.trace.digest(), first.digest())
        self.assertEqual(other.failures, [])

    def test_unordered_delivery_across_seeds(self):
        """Without per-link ordering the honest flow still passes for many seeds."""
        data = json.loads(bundled("honest").read_text())
        data["delay"] = {"min": 0, "max": 6, "ordered": False}
        scenario = Scenario.from_dict(data)
        for seed in range(20):
            result = execute(scenario, seed=seed)
            self.assertEqual(result.failures, [], seed)

    def test_settlement_matches_request_count(self):
        """A session of k balance calls settles with k tokens for the node."""
        for count in [0, 1, 3, 50]:
            scenario = Scenario.from_dict(
                {
                    "name": f"session_{count}",
                    "seed": count,
                    "nodes": [{"id": "fn1", "balance": 5000, "deposit": 1000}],
                    "clients": [{"id": "lc1", "node": "fn1", "balance": 2000, "budget": 1000}],
                    "script": [
                        {"at": 12, "action": "handshake", "client": "lc1"},
                        {"at": 30, "action": "calls", "client": "lc1", "count": count},
                        {"at": 150, "action": "close", "client": "lc1"},
                    ],
                    "expect": {
                        "settlements": [{"fn_amount": count, "lc_amount": 1000 - count}],
                        "verdicts": {"Invalid": 0, "Fraudulent": 0},
                        "min_verdicts": {"Valid": count},
                    },
                }
            )
            self.assertEqual(execute(scenario).failures, [], count)

    def test_bad_references_and_bounds(self):
        """Ensure undeclared actors and delays above the synchrony bound are refused."""
        scenario = load_scenario(bundled("honest"))
        broken = Scenario.from_dict({**json.loads(bundled("honest").read_text()), "witness": "ghost"})
        with self.assertRaises(ScriptReferenceError):
            Simulation(broken, broken.config())
        with self.assertRaises(BoundsViolation):
            Simulation(scenario, scenario.config(delay=(1, 11)))
        simulation = Simulation(scenario, scenario.config())
        with self.assertRaises(BoundsViolation):
            simulation.inject_delay(("lc1", "fn1"), 3, 2)
        with self.assertRaises(ScriptReferenceError):
            simulation.inject_delay(("lc1", "ghost"), 1, 2)

    def test_fifo_links(self):
        """On ordered links messages arrive in the order they were sent."""
        records = Simulation(*self.honest()).run().records
        last = {}
        for record in records:
            if record["type"] != "send":
                continue
            link = (record["from"], record["to"])
            self.assertGreaterEqual(record["deliver_at"], last.get(link, 0))
            last[link] = record["deliver_at"]

    def test_horizon_stops_the_run(self):
        """Ensure nothing is delivered after the horizon."""
        scenario = load_scenario(bundled("honest"))
        trace = Simulation(scenario, scenario.config(horizon=40)).run()
        self.assertTrue(all(record["t"] <= 40 for record in trace.records))
        self.assertEqual(trace.records[-1]["type"], "end")

    def honest(self):
        """Return the honest scenario with its config."""
        scenario = load_scenario(bundled("honest"))
        return scenario, scenario.config()

    def test_bundled_scenarios_meet_expectations(self):
        """Every bundled scenario except the load run meets its expectations."""
        for path in sorted(BUNDLED_DIR.glob("*.json")):
            if path.stem == "load":
                continue
            result = execute_path(path)
            self.assertEqual(result.error, "", path.stem)
            self.assertEqual(result.failures, [], path.stem)

    def test_periodic_status_requests(self):
        """The free status requests sent every few blocks are traced as GetChannelStatus calls."""
        result = execute_path(bundled("honest_many"))
        self.assertEqual(result.error, "")
        self.assertEqual(result.failures, [])
        periodic = [record for record in result.trace.records if record["type"] == "request" and record["probe"]]
        self.assertTrue(periodic)
        self.assertEqual({record["method"] for record in periodic}, {"get_channel_status"})

    def test_load_scenario(self):
        """Twenty clients with 240 calls each all get Valid verdicts and settle."""
        result = execute_path(bundled("load"))
        self.assertEqual(result.error, "")
        self.assertEqual(result.failures, [])
        self.assertEqual(set(result.report["verdicts"]), {"Valid"})
        self.assertGreaterEqual(result.report["verdicts"]["Valid"], 4800)

    def test_negative_control(self):
        """Check that swapping in a cheating node makes the honest expectations fail."""
        scenario = load_scenario(bundled("honest")).with_node_policy("fn1", {"kind": "WrongAmount", "delta": 3})
        result = execute(scenario)
        self.assertTrue(result.failures)
        self.assertEqual(result.report["verdicts"].get("Fraudulent:PaymentMismatch"), 1)


class MetricsTests(TestCase):
    """Tests for the report derived from traces."""

    @classmethod
    def setUpClass(cls):
        """Run the honest scenario once for all report tests."""
        super().setUpClass()
        cls.result = execute_path(bundled("honest_many"))

    def test_overheads(self):
        """Check that measured metadata overheads equal the fixed field sizes."""
        messages = self.result.report["messages"]
        self.assertEqual(messages["request"]["overhead"]["mean"], 210)
        self.assertEqual(messages["response"]["overhead"]["mean"], 186)
        deltas = [row["delta_pct"] for row in self.result.report["comparison"]]
        self.assertEqual(deltas[:2], [-7.1, -0.5])

    def test_report_contents(self):
        """Steps, lifecycle counts and conservation are reported."""
        report = self.result.report
        self.assertTrue(report["conserved"])
        self.assertEqual(report["lifecycle"]["open"], 3)
        self.assertEqual(report["lifecycle"]["confirm"], 3)
        self.assertEqual(report["steps"]["A_request_generation"], report["steps"]["D_response_verification"])
        self.assertEqual(report["final_steps"], {"lc1": "IDLE", "lc2": "IDLE", "lc3": "IDLE"})

    def test_report_is_a_function_of_the_trace(self):
        """Check that re-reading the written trace gives the same report and text."""
        with tempfile.TemporaryDirectory() as out:
            path = Path(out) / "trace.jsonl"
            self.result.trace.write(path)
            report = build_report(read_trace(path))
        self.assertEqual(report, self.result.report)
        self.assertEqual(render_text(report), render_text(self.result.report))

    def test_malformed_trace(self):
        """Ensure lines that are not trace records are refused."""
        with tempfile.NamedTemporaryFile("w", suffix=".jsonl", delete=False) as handle:
            handle.write('{"type": "block"}\nnot json\n')
        try:
            with self.assertRaises(MalformedTrace):
                read_trace(handle.name)
        finally:
            os.unlink(handle.name)


class CommandTests(TestCase):
    """Tests for the management commands."""

    def test_run_scenario_writes_outputs(self):
        """A passing run writes both files and stores a passed run."""
        with tempfile.TemporaryDirectory() as out:
            call_command("run_scenario", str(bundled("honest")), out=out, stdout=StringIO())
            self.assertTrue((Path(out) / "trace.jsonl").is_file())
            report = json.loads((Path(out) / "report.json").read_text())
            buffer = StringIO()
            call_command("report", str(Path(out) / "trace.jsonl"), json=True, stdout=buffer)
        self.assertEqual(json.loads(buffer.getvalue()), report)
        self.assertEqual(ScenarioRun.objects.get().outcome, ScenarioRun.Outcome.PASSED)

    def test_exit_codes(self):
        """A missing file exits with 2 and unmet expectations with 1."""
        with self.assertRaises(CommandError) as ctx:
            call_command("run_scenario", "/nonexistent.json", stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 2)
        data = json.loads(bundled("honest_zero").read_text())
        data["expect"]["channels_closed"] = 5
        with tempfile.TemporaryDirectory() as out:
            path = Path(out) / "wrong.json"
            path.write_text(json.dumps(data))
            with self.assertRaises(CommandError) as ctx:
                call_command("run_scenario", str(path), out=out, stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertEqual(ScenarioRun.objects.get().outcome, ScenarioRun.Outcome.FAILED)

    def test_bundled_scenario_by_name(self):
        """A bare name runs the bundled scenario of that name; an unknown name exits with 2."""
        with tempfile.TemporaryDirectory() as out:
            call_command("run_scenario", "honest", out=out, stdout=StringIO())
            self.assertTrue((Path(out) / "report.json").is_file())
        self.assertEqual(ScenarioRun.objects.get().name, "honest")
        with self.assertRaises(CommandError) as ctx:
            call_command("run_scenario", "no_such_scenario", stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 2)

    def test_overrides(self):
        """Command line parameters override the scenario's."""
        with tempfile.TemporaryDirectory() as out:
            call_command("run_scenario", str(bundled("honest")), out=out, dispute_window=4, stdout=StringIO())
            records = read_trace(Path(out) / "trace.jsonl")
        self.assertEqual(records[0]["config"]["dispute_window"], 4)

    def test_suite(self):
        """The suite runs the chosen scenarios and prints a table."""
        buffer = StringIO()
        call_command("suite", only=["honest", "fraud_payment"], jobs=2, stdout=buffer)
        self.assertIn("PASSED", buffer.getvalue())
        self.assertEqual(ScenarioRun.objects.count(), 2)


class ViewAndAdminTests(TestCase):
    """Tests for the JSON views and the admin action."""

    def setUp(self):
        """Store one run."""
        call_command("suite", only=["honest_zero"], stdout=StringIO())
        self.stored = ScenarioRun.objects.get()

    def test_index(self):
        """The index lists bundled scenarios and stored runs."""
        body = self.client.get(reverse("parp:index")).json()
        self.assertIn("honest", body["scenarios"])
        self.assertEqual(body["runs"][0]["name"], "honest_zero")

    def test_run_report(self):
        """A stored run's report is served; unknown ids are 404."""
        body = self.client.get(reverse("parp:run_report", args=[self.stored.pk])).json()
        self.assertEqual(body["outcome"], "Passed")
        self.assertTrue(body["report"]["conserved"])
        self.assertEqual(self.client.get(reverse("parp:run_report", args=[9999])).status_code, 404)

    def test_rerun_action(self):
        """Check that re-running reproduces the trace digest."""
        rerun_scenarios(None, None, ScenarioRun.objects.all())
        digests = set(ScenarioRun.objects.values_list("trace_digest", flat=True))
        self.assertEqual(ScenarioRun.objects.count(), 2)
        self.assertEqual(len(digests), 1)
        self.assertEqual(str(self.stored), "honest_zero (seed 2)")

    def test_store_survives_database_errors(self):
        """A database failure while recording a run is logged and swallowed."""
        result = execute_path(bundled("honest_zero"))
        with patch.object(ScenarioRun.objects, "create", side_effect=DatabaseError("database is locked")):
            with self.assertLogs("django", level="ERROR") as logs:
                self.assertIsNone(store(result))
        self.assertIn("honest_zero", logs.output[0])
        self.assertEqual(ScenarioRun.objects.count(), 1)
