"""
A hexary Merkle Patricia trie with inclusion proofs.

Nodes live in a content-addressed store keyed by their digest, so inserting returns a new
trie version while every older root stays readable. Children are always referenced by hash.
"""
from dataclasses import dataclass
import struct

from .codec import CodecError, Reader, prefixed
from .crypto import DIGEST_SIZE, digest
from .errors import ParpError

EMPTY_ROOT = digest(b"")
LEAF, EXTENSION, BRANCH = 0x01, 0x02, 0x03


class TrieError(ParpError):
    """Base class for trie failures."""


class EmptyKey(TrieError):
    """Keys must be at least one byte long."""


class KeyAbsent(TrieError):
    """The key is not in the trie, so there is nothing to prove."""


class MalformedNode(TrieError):
    """A node encoding could not be decoded."""


@dataclass(frozen=True)
class Leaf:
    """Terminal node holding the rest of the key and the value."""

    path: tuple
    value: bytes


@dataclass(frozen=True)
class Extension:
    """Shared key prefix leading to a single branch."""

    path: tuple
    child: bytes


@dataclass(frozen=True)
class Branch:
    """Sixteen child slots plus a value for a key that ends here."""

    children: tuple
    value: bytes = None


@dataclass(frozen=True)
class MerkleProof:
    """Encoded nodes from the root down to the node holding key, plus the claimed value."""

    nodes: tuple
    key: bytes
    value: bytes


def to_nibbles(key):
    """Split a byte string into its 4-bit nibbles, high nibble first."""
    return tuple(nibble for byte in key for nibble in (byte >> 4, byte & 0x0F))


def tx_key(index):
    """Return the minimal big-endian encoding of a transaction index (0 becomes 0x00)."""
    return index.to_bytes(max(1, (index.bit_length() + 7) // 8), "big")


def encode_node(node):
    """Encode a node as a 1-byte tag followed by length-prefixed fields."""
    if isinstance(node, Leaf):
        return bytes([LEAF]) + prefixed(bytes(node.path)) + prefixed(node.value)
    if isinstance(node, Extension):
        return bytes([EXTENSION]) + prefixed(bytes(node.path)) + prefixed(node.child)
    slots = b"".join(prefixed(child or b"") for child in node.children)
    if node.value is None:
        return bytes([BRANCH]) + slots + b"\x00"
    return bytes([BRANCH]) + slots + b"\x01" + prefixed(node.value)


def _path(raw):
    """Validate a nibble path read from an encoded node."""
    if any(nibble > 0x0F for nibble in raw):
        raise MalformedNode("Path contains a value that is not a nibble.")
    return tuple(raw)


def _child(raw):
    """Validate a child reference read from an encoded node."""
    if len(raw) != DIGEST_SIZE:
        raise MalformedNode(f"Child reference must be {DIGEST_SIZE} bytes, got {len(raw)}.")
    return raw


def decode_node(data):
    """Decode a node, raising MalformedNode for anything that is not a canonical encoding."""
    try:
        reader = Reader(data)
        tag = reader.uint(1)
        if tag == LEAF:
            node = Leaf(_path(reader.prefixed()), reader.prefixed())
        elif tag == EXTENSION:
            path = _path(reader.prefixed())
            if not path:
                raise MalformedNode("Extension with an empty path.")
            node = Extension(path, _child(reader.prefixed()))
        elif tag == BRANCH:
            children = tuple(_child(raw) if raw else None for raw in (reader.prefixed() for _ in range(16)))
            flag = reader.uint(1)
            if flag not in (0, 1):
                raise MalformedNode(f"Bad branch value flag {flag}.")
            node = Branch(children, reader.prefixed() if flag else None)
        else:
            raise MalformedNode(f"Unknown node tag {tag}.")
        reader.finish()
    except CodecError as err:
        raise MalformedNode(str(err)) from err
    return node


def _common_prefix(left, right):
    """Return the length of the shared prefix of two nibble paths."""
    size = 0
    for one, other in zip(left, right):
        if one != other:
            break
        size += 1
    return size


class Trie:
    """An immutable trie version: a root digest over a shared node store."""

    def __init__(self, root=EMPTY_ROOT, store=None):
        """Wrap a root; a fresh store is created for a new empty trie."""
        self.root = root
        self.store = {} if store is None else store

    def root_hash(self):
        """Return the root digest (the sentinel digest of b"" when empty)."""
        return self.root

    @classmethod
    def from_items(cls, items):
        """Build a trie from (key, value) pairs."""
        trie = cls()
        for key, value in items:
            trie = trie.insert(key, value)
        return trie

    def _put(self, node):
        """Store a node and return its digest."""
        encoded = encode_node(node)
        ref = digest(encoded)
        self.store[ref] = encoded
        return ref

    def _load(self, ref):
        """Fetch and decode a stored node."""
        return decode_node(self.store[ref])

    def insert(self, key, value):
        """Return a new version holding value under key."""
        if not key:
            raise EmptyKey("Cannot insert an empty key.")
        ref = None if self.root == EMPTY_ROOT else self.root
        return Trie(self._insert(ref, to_nibbles(key), bytes(value)), self.store)

    def _insert(self, ref, path, value):
        """Insert below ref and return the digest of the rewritten node."""
        if ref is None:
            return self._put(Leaf(path, value))
        node = self._load(ref)
        if isinstance(node, Branch):
            if not path:
                return self._put(Branch(node.children, value))
            children = list(node.children)
            children[path[0]] = self._insert(children[path[0]], path[1:], value)
            return self._put(Branch(tuple(children), node.value))
        shared = _common_prefix(node.path, path)
        if isinstance(node, Leaf) and node.path == path:
            return self._put(Leaf(path, value))
        if isinstance(node, Extension) and shared == len(node.path):
            return self._put(Extension(node.path, self._insert(node.child, path[shared:], value)))
        children = [None] * 16
        branch_value = None
        old_rest = node.path[shared:]
        if isinstance(node, Leaf):
            if old_rest:
                children[old_rest[0]] = self._put(Leaf(old_rest[1:], node.value))
            else:
                branch_value = node.value
        elif len(old_rest) == 1:
            children[old_rest[0]] = node.child
        else:
            children[old_rest[0]] = self._put(Extension(old_rest[1:], node.child))
        new_rest = path[shared:]
        if new_rest:
            children[new_rest[0]] = self._put(Leaf(new_rest[1:], value))
        else:
            branch_value = value
        ref = self._put(Branch(tuple(children), branch_value))
        if shared:
            ref = self._put(Extension(path[:shared], ref))
        return ref

    def _walk(self, key):
        """Follow key from the root, returning the encoded nodes visited and the value found."""
        if self.root == EMPTY_ROOT:
            raise KeyAbsent("The trie is empty.")
        path = to_nibbles(key)
        ref = self.root
        nodes = []
        while True:
            nodes.append(self.store[ref])
            node = self._load(ref)
            if isinstance(node, Leaf):
                if node.path != path:
                    raise KeyAbsent(f"No value under {key.hex()}.")
                return nodes, node.value
            if isinstance(node, Extension):
                size = len(node.path)
                if path[:size] != node.path:
                    raise KeyAbsent(f"No value under {key.hex()}.")
                path = path[size:]
                ref = node.child
                continue
            if not path:
                if node.value is None:
                    raise KeyAbsent(f"No value under {key.hex()}.")
                return nodes, node.value
            ref = node.children[path[0]]
            if ref is None:
                raise KeyAbsent(f"No value under {key.hex()}.")
            path = path[1:]

    def get(self, key):
        """Return the value stored under key."""
        return self._walk(key)[1]

    def prove(self, key):
        """Return the inclusion proof of key: only the nodes on its path."""
        nodes, value = self._walk(key)
        return MerkleProof(tuple(nodes), bytes(key), value)

    def items(self):
        """Yield every (key nibbles, value) pair, in nibble order."""
        if self.root == EMPTY_ROOT:
            return
        yield from self._items(self.root, ())

    def _items(self, ref, prefix):
        """Yield the pairs below one node."""
        node = self._load(ref)
        if isinstance(node, Leaf):
            yield prefix + node.path, node.value
        elif isinstance(node, Extension):
            yield from self._items(node.child, prefix + node.path)
        else:
            if node.value is not None:
                yield prefix, node.value
            for nibble, child in enumerate(node.children):
                if child is not None:
                    yield from self._items(child, prefix + (nibble,))


def verify_proof(root, proof):
    """Check that the proof's hash chain links root to (key, value); malformed input is simply False."""
    try:
        path = to_nibbles(proof.key)
        expected = root
        last = len(proof.nodes) - 1
        for index, encoded in enumerate(proof.nodes):
            if digest(encoded) != expected:
                return False
            node = decode_node(encoded)
            if isinstance(node, Leaf):
                return index == last and node.path == path and node.value == proof.value
            if isinstance(node, Extension):
                size = len(node.path)
                if path[:size] != node.path:
                    return False
                path = path[size:]
                expected = node.child
            elif not path:
                return index == last and node.value is not None and node.value == proof.value
            else:
                expected = node.children[path[0]]
                if expected is None:
                    return False
                path = path[1:]
        return False
    except (TrieError, TypeError):
        return False


def encode_proof(proof):
    """Serialize a proof: 2-byte node count, length-prefixed nodes, then length-prefixed key and value."""
    if len(proof.nodes) >= 2**16:
        raise TrieError("Too many nodes for the proof format.")
    nodes = b"".join(prefixed(node) for node in proof.nodes)
    return struct.pack(">H", len(proof.nodes)) + nodes + prefixed(proof.key) + prefixed(proof.value)


def decode_proof(data):
    """Parse a serialized proof, raising CodecError on malformed input."""
    reader = Reader(data)
    count = reader.uint(2)
    nodes = tuple(reader.prefixed() for _ in range(count))
    proof = MerkleProof(nodes, reader.prefixed(), reader.prefixed())
    reader.finish()
    return proof


def proof_size(proof):
    """Return the serialized size of a proof in bytes."""
    return len(encode_proof(proof))
