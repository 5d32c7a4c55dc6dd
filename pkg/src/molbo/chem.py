"""SMILES parsing, circular (Morgan-style) fingerprints and Tanimoto similarity.

Supported SMILES subset: organic-subset atoms ``B C N O P S F Cl Br I``,
aromatic ``c n o s``, bracket atoms ``[NH4+]`` with charge and explicit H,
bonds ``- = #``, branches, ring closures ``1``..``9`` and ``%nn``.
Stereo marks (``/ \\ @``) and isotope numbers are accepted and dropped.
Dot-separated fragments are rejected.

Hashing uses the splitmix64 finalizer::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

over 64-bit words, so bit positions are identical on every platform.
"""

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .kernels import tanimoto_gram

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn"
).split()
ATOMIC_NUMBER = {sym: i + 1 for i, sym in enumerate(ELEMENTS)}

ORGANIC_VALENCES = {
    "B": (3,), "C": (4,), "N": (3, 5), "O": (2,), "P": (3, 5), "S": (2, 4, 6),
    "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,),
}
AROMATIC_ORGANIC = {"c": "C", "n": "N", "o": "O", "s": "S"}
# inside brackets a few more aromatic symbols are legal
AROMATIC_BRACKET = {"c": "C", "n": "N", "o": "O", "s": "S", "p": "P", "b": "B", "se": "Se", "as": "As"}


class BondOrder(IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4


class SmilesError(ValueError):
    """Base class for SMILES parse errors; ``offset`` is the byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class UnbalancedError(SmilesError):
    pass


class UnknownElementError(SmilesError):
    pass


class ValenceError(SmilesError):
    pass


class MultiFragmentError(SmilesError):
    pass


class SmilesSyntaxError(SmilesError):
    pass


@dataclass(frozen=True)
class Atom:
    element: str
    charge: int = 0
    hydrogens: int = 0
    aromatic: bool = False
    bracket: bool = False


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: BondOrder


@dataclass(frozen=True)
class MolGraph:
    atoms: tuple
    bonds: tuple

    def neighbors(self):
        """Adjacency list of ``(neighbor, bond order)`` pairs per atom."""
        adj = [[] for _ in self.atoms]
        for b in self.bonds:
            adj[b.begin].append((b.end, int(b.order)))
            adj[b.end].append((b.begin, int(b.order)))
        return adj

    @property
    def num_atoms(self):
        return len(self.atoms)


@dataclass(frozen=True, eq=False)
class Fingerprint:
    """Fixed-width bit vector packed little-endian into ``uint64`` words."""

    bits: np.ndarray
    width: int
    popcount: int = field(init=False)

    def __post_init__(self):
        if self.width < 64 or self.width & (self.width - 1):
            raise ValueError(f"width must be a power of two >= 64, got {self.width}")
        if self.bits.dtype != np.uint64 or self.bits.shape != (self.width // 64,):
            raise ValueError("bits must be a uint64 array of width/64 words")
        self.bits.setflags(write=False)
        object.__setattr__(self, "popcount", int(np.bitwise_count(self.bits).sum()))

    @classmethod
    def from_indices(cls, indices, width=1024):
        words = np.zeros(width // 64, dtype=np.uint64)
        for i in indices:
            words[i // 64] |= np.uint64(1) << np.uint64(i % 64)
        return cls(words, width)

    def on_bits(self):
        unpacked = np.unpackbits(self.bits.view(np.uint8), bitorder="little")
        return np.flatnonzero(unpacked)

    def to_array(self):
        return np.unpackbits(self.bits.view(np.uint8), bitorder="little").astype(np.float32)

    def __eq__(self, other):
        if not isinstance(other, Fingerprint):
            return NotImplemented
        return self.width == other.width and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.width, self.bits.tobytes()))


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


class _Parser:
    def __init__(self, text):
        self.s = text
        self.i = 0
        self.atoms = []  # dicts while parsing
        self.bonds = {}  # (min, max) -> order or None (unspecified)
        self.rings = {}  # ring id -> (atom, bond order or None, offset)

    def error(self, cls, message, offset=None):
        raise cls(message, self.i if offset is None else offset)

    def parse(self):
        s = self.s
        if not s:
            raise SmilesSyntaxError("empty SMILES", 0)
        stack = []
        prev = None
        pending = None
        pending_at = None
        while self.i < len(s):
            ch = s[self.i]
            if ch == "(":
                if prev is None:
                    self.error(SmilesSyntaxError, "branch before any atom")
                if pending is not None:
                    self.error(SmilesSyntaxError, "bond symbol before branch")
                stack.append((prev, self.i))
                self.i += 1
                if self.i < len(s) and s[self.i] == ")":
                    self.error(SmilesSyntaxError, "empty branch")
            elif ch == ")":
                if not stack:
                    self.error(UnbalancedError, "unmatched ')'")
                if pending is not None:
                    self.error(SmilesSyntaxError, "dangling bond symbol", pending_at)
                prev, _ = stack.pop()
                self.i += 1
            elif ch in "-=#:":
                if pending is not None:
                    self.error(SmilesSyntaxError, "consecutive bond symbols")
                pending = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE,
                           "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}[ch]
                pending_at = self.i
                self.i += 1
            elif ch in "/\\":
                if pending is not None:
                    self.error(SmilesSyntaxError, "consecutive bond symbols")
                pending = BondOrder.SINGLE
                pending_at = self.i
                self.i += 1
            elif ch == ".":
                self.error(MultiFragmentError, "multi-fragment SMILES not supported")
            elif ch.isdigit() or ch == "%":
                if prev is None:
                    self.error(SmilesSyntaxError, "ring bond before any atom")
                start = self.i
                if ch == "%":
                    digits = s[self.i + 1:self.i + 3]
                    if len(digits) != 2 or not digits.isdigit():
                        self.error(SmilesSyntaxError, "'%' must be followed by two digits")
                    rid = int(digits)
                    self.i += 3
                else:
                    rid = int(ch)
                    self.i += 1
                self._ring(prev, rid, pending, start)
                pending = None
            else:
                at = self.i
                idx = self._atom()
                if prev is not None:
                    self._add_bond(prev, idx, pending, at)
                elif pending is not None:
                    self.error(SmilesSyntaxError, "bond symbol before first atom", pending_at)
                pending = None
                prev = idx
        if pending is not None:
            self.error(SmilesSyntaxError, "dangling bond symbol", pending_at)
        if stack:
            self.error(UnbalancedError, "unclosed branch '('", stack[-1][1])
        if self.rings:
            rid, (_, _, off) = next(iter(self.rings.items()))
            self.error(UnbalancedError, f"unclosed ring bond {rid}", off)
        return self._finish()

    def _atom(self):
        s = self.s
        start = self.i
        if s[self.i] == "[":
            return self._bracket_atom()
        two = s[self.i:self.i + 2]
        if two in ("Cl", "Br"):
            self.i += 2
            return self._push(two, aromatic=False, bracket=False, offset=start)
        ch = s[self.i]
        if ch in ORGANIC_VALENCES:
            self.i += 1
            return self._push(ch, aromatic=False, bracket=False, offset=start)
        if ch in AROMATIC_ORGANIC:
            self.i += 1
            return self._push(AROMATIC_ORGANIC[ch], aromatic=True, bracket=False, offset=start)
        if ch.isalpha() or ch == "*":
            self.error(UnknownElementError, f"unknown or non-organic atom '{ch}' outside brackets")
        self.error(SmilesSyntaxError, f"unexpected character {ch!r}")

    def _bracket_atom(self):
        s = self.s
        start = self.i
        close = s.find("]", start)
        if close < 0:
            self.error(UnbalancedError, "unclosed '['")
        body = s[start + 1:close]
        j = 0
        while j < len(body) and body[j].isdigit():  # isotope, dropped
            j += 1
        sym = None
        aromatic = False
        for cand in (body[j:j + 2], body[j:j + 1]):
            if cand in ATOMIC_NUMBER:
                sym = cand
                break
            if cand in AROMATIC_BRACKET:
                sym = AROMATIC_BRACKET[cand]
                aromatic = True
                break
        if sym is None:
            self.error(UnknownElementError, f"unknown element in bracket atom '[{body}]'", start + 1 + j)
        j += len(sym)
        while j < len(body) and body[j] == "@":
            j += 1
        h = 0
        if j < len(body) and body[j] == "H":
            j += 1
            h = 1
            if j < len(body) and body[j].isdigit():
                h = int(body[j])
                j += 1
        charge = 0
        if j < len(body) and body[j] in "+-":
            sign = 1 if body[j] == "+" else -1
            j += 1
            if j < len(body) and body[j].isdigit():
                k = j
                while k < len(body) and body[k].isdigit():
                    k += 1
                charge = sign * int(body[j:k])
                j = k
            else:
                charge = sign
                while j < len(body) and body[j] == ("+" if sign > 0 else "-"):
                    charge += sign
                    j += 1
        if j != len(body):
            self.error(SmilesSyntaxError, f"unparsed bracket atom content '{body[j:]}'", start + 1 + j)
        self.i = close + 1
        return self._push(sym, aromatic=aromatic, bracket=True, offset=start, h=h, charge=charge)

    def _push(self, element, aromatic, bracket, offset, h=0, charge=0):
        self.atoms.append({"element": element, "aromatic": aromatic, "bracket": bracket,
                           "h": h, "charge": charge, "offset": offset})
        return len(self.atoms) - 1

    def _add_bond(self, a, b, order, offset):
        if a == b:
            self.error(SmilesSyntaxError, "self-loop bond", offset)
        key = (min(a, b), max(a, b))
        if key in self.bonds:
            self.error(SmilesSyntaxError, "duplicate bond", offset)
        self.bonds[key] = order

    def _ring(self, atom, rid, order, offset):
        if rid in self.rings:
            other, other_order, _ = self.rings.pop(rid)
            if order is not None and other_order is not None and order != other_order:
                self.error(SmilesSyntaxError, f"conflicting bond orders on ring bond {rid}", offset)
            self._add_bond(other, atom, order if order is not None else other_order, offset)
        else:
            self.rings[rid] = (atom, order, offset)

    def _finish(self):
        n = len(self.atoms)
        bonds = []
        for (a, b), order in self.bonds.items():
            if order is None:
                both = self.atoms[a]["aromatic"] and self.atoms[b]["aromatic"]
                order = BondOrder.AROMATIC if both else BondOrder.SINGLE
            bonds.append(Bond(a, b, BondOrder(order)))
        bonds.sort(key=lambda b: (b.begin, b.end))

        valence = [0] * n
        n_arom = [0] * n
        for b in bonds:
            for k in (b.begin, b.end):
                if b.order == BondOrder.AROMATIC:
                    valence[k] += 1
                    n_arom[k] += 1
                else:
                    valence[k] += int(b.order)

        atoms = []
        for k, a in enumerate(self.atoms):
            if a["bracket"]:
                h = a["h"]
            else:
                h = self._implicit_h(a, valence[k], n_arom[k] > 0)
            atoms.append(Atom(a["element"], a["charge"], h, a["aromatic"], a["bracket"]))

        if n > 1:
            seen = {0}
            todo = [0]
            adj = [[] for _ in range(n)]
            for b in bonds:
                adj[b.begin].append(b.end)
                adj[b.end].append(b.begin)
            while todo:
                for j in adj[todo.pop()]:
                    if j not in seen:
                        seen.add(j)
                        todo.append(j)
            if len(seen) != n:  # pragma: no cover - grammar keeps one fragment connected
                raise MultiFragmentError("disconnected graph", 0)
        return MolGraph(tuple(atoms), tuple(bonds))

    def _implicit_h(self, a, used, has_aromatic_bond):
        allowed = ORGANIC_VALENCES[a["element"]]
        if a["aromatic"]:
            if used > max(allowed):
                self.error(ValenceError, f"valence exceeded on aromatic {a['element'].lower()}", a["offset"])
            # one valence unit goes to the delocalized pi system
            used += 1
            for v in allowed:
                if v >= used:
                    return v - used
            return 0
        for v in allowed:
            if v >= used:
                return v - used
        self.error(ValenceError, f"valence {used} exceeds allowed {max(allowed)} for {a['element']}",
                   a["offset"])


def parse_smiles(text):
    """Parse a single-fragment SMILES string into a :class:`MolGraph`.

    Raises a :class:`SmilesError` subclass carrying the byte offset.
    """
    if not isinstance(text, str):
        raise TypeError("SMILES must be a str")
    if not text.isascii():
        bad = next(i for i, c in enumerate(text) if not c.isascii())
        raise SmilesSyntaxError("non-ASCII character", bad)
    return _Parser(text).parse()


# --------------------------------------------------------------------------
# hashing and fingerprints
# --------------------------------------------------------------------------


def splitmix64(z):
    z = (z + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def hash_sequence(values, seed=0):
    """Order-sensitive 64-bit hash of a sequence of integers."""
    h = splitmix64(seed & MASK64)
    for v in values:
        h = splitmix64(h ^ (v & MASK64))
    return h


def initial_atom_invariants(g):
    """One 64-bit code per atom from (element, charge, degree, total H, aromatic)."""
    degree = [0] * g.num_atoms
    for b in g.bonds:
        degree[b.begin] += 1
        degree[b.end] += 1
    return [
        hash_sequence((ATOMIC_NUMBER[a.element], a.charge, degree[k], a.hydrogens, int(a.aromatic)))
        for k, a in enumerate(g.atoms)
    ]


def morgan_codes(g, radius=2):
    """Per-radius lists of atom-environment codes, ``codes[r][atom]``."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    codes = [initial_atom_invariants(g)]
    adj = g.neighbors()
    for r in range(1, radius + 1):
        prev = codes[-1]
        nxt = []
        for k in range(g.num_atoms):
            env = sorted((order, prev[j]) for j, order in adj[k])
            flat = [r, prev[k]]
            for order, code in env:
                flat.append(order)
                flat.append(code)
            nxt.append(hash_sequence(flat))
        codes.append(nxt)
    return codes


def morgan_fingerprint(g, radius=2, width=1024):
    """Fold every atom environment up to ``radius`` into a ``width``-bit vector."""
    if g.num_atoms == 0:
        raise ValueError("cannot fingerprint an empty graph")
    if width < 64 or width & (width - 1):
        raise ValueError(f"width must be a power of two >= 64, got {width}")
    positions = {code % width for layer in morgan_codes(g, radius) for code in layer}
    return Fingerprint.from_indices(sorted(positions), width)


def tanimoto(a, b):
    """|a & b| / (|a| + |b| - |a & b|), with two empty vectors scoring 1."""
    if a.width != b.width:
        raise ValueError(f"fingerprint widths differ: {a.width} vs {b.width}")
    inter = int(np.bitwise_count(a.bits & b.bits).sum())
    union = a.popcount + b.popcount - inter
    return 1.0 if union == 0 else inter / union


def pack_fingerprints(fps):
    """Stack fingerprints into an ``(n, width/64)`` ``uint64`` matrix."""
    widths = {fp.width for fp in fps}
    if len(widths) > 1:
        raise ValueError(f"mixed fingerprint widths {sorted(widths)}")
    return np.stack([fp.bits for fp in fps])


def tanimoto_matrix(fps_a, fps_b=None):
    a = pack_fingerprints(fps_a)
    b = a if fps_b is None else pack_fingerprints(fps_b)
    return tanimoto_gram(a, b)
