"""SMILES lexing, parsing into a molecular graph, validity, circular
fingerprints and Tanimoto similarity.

Supported subset: organic atoms B C N O P S F Cl Br I and aromatic
b c n o p s; bracket atoms with isotope, chirality, H count, charge and
atom class; bonds ``- = # : / \\`` (directional bonds read as single);
ring closures 1-9 and %nn; branches.  Disconnected fragments ('.') are not
supported.

Validity is a valence check.  Non-aromatic bonds count their order.
Aromatic systems are checked by kekulization: every aromatic atom that still
needs a pi bond must be paired with an aromatic neighbour through a
perfect matching.  That accepts fused rings and exocyclic ``c=O`` and
rejects things like ``c1ccnc1``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._util import hash_ints


class SmilesError(ValueError):
    """Base class for every SMILES failure; carries the character position."""

    def __init__(self, reason: str, position: int = 0):
        super().__init__(f"{reason} (at position {position})")
        self.reason = reason
        self.position = position


class UnterminatedBracket(SmilesError):
    pass


class UnknownCharacter(SmilesError):
    pass


class ParseError(SmilesError):
    pass


class WidthMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# element data

# symbol: (atomic number, average mass, allowed neutral valences or None)
ELEMENTS: dict[str, tuple[int, float, tuple[int, ...] | None]] = {
    "H": (1, 1.008, (1,)),
    "Li": (3, 6.94, None),
    "B": (5, 10.81, (3,)),
    "C": (6, 12.011, (4,)),
    "N": (7, 14.007, (3,)),
    "O": (8, 15.999, (2,)),
    "F": (9, 18.998, (1,)),
    "Na": (11, 22.990, None),
    "Mg": (12, 24.305, None),
    "Si": (14, 28.085, (4,)),
    "P": (15, 30.974, (3, 5)),
    "S": (16, 32.06, (2, 4, 6)),
    "Cl": (17, 35.45, (1,)),
    "K": (19, 39.098, None),
    "Ca": (20, 40.078, None),
    "Fe": (26, 55.845, None),
    "Cu": (29, 63.546, None),
    "Zn": (30, 65.38, None),
    "As": (33, 74.922, (3, 5)),
    "Se": (34, 78.971, (2, 4, 6)),
    "Br": (35, 79.904, (1,)),
    "I": (53, 126.904, (1,)),
    "Pt": (78, 195.084, None),
}

ORGANIC = {"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"}
AROMATIC_ORGANIC = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
AROMATIC_BRACKET = {**AROMATIC_ORGANIC, "se": "Se", "as": "As"}

_PNICTOGENS = {"N", "P", "As"}
_CHALCOGENS = {"O", "S", "Se"}
_HALOGENS = {"F", "Cl", "Br", "I"}

BOND_SYMBOLS = {"-": "single", "/": "single", "\\": "single", "=": "double", "#": "triple", ":": "aromatic"}
BOND_ORDER = {"single": 1, "double": 2, "triple": 3, "aromatic": 1}
_BOND_CODE = {"single": 1, "double": 2, "triple": 3, "aromatic": 4}


def allowed_valences(element: str, charge: int) -> tuple[int, ...] | None:
    """Allowed total valences after charge adjustment; None means unchecked."""
    base = ELEMENTS[element][2]
    if base is None:
        return None
    if element in _PNICTOGENS or element in _CHALCOGENS or element in _HALOGENS:
        shifted = [v + charge for v in base]
    elif element == "B":
        shifted = [v - charge for v in base]
    else:
        shifted = [v - abs(charge) for v in base]
    return tuple(v for v in shifted if v >= 0)


# ---------------------------------------------------------------------------
# lexing

class PrimitiveToken(NamedTuple):
    kind: str  # atom | bracket-atom | bond | ring-closure | branch-open | branch-close
    text: str
    position: int


def tokenize_primitive(smiles: str) -> list[PrimitiveToken]:
    """Split a SMILES string into primitive tokens that partition it exactly."""
    if not smiles:
        raise ParseError("empty input", 0)
    tokens = []
    i, n = 0, len(smiles)
    while i < n:
        ch = smiles[i]
        if ch == "[":
            j = smiles.find("]", i + 1)
            if j < 0:
                raise UnterminatedBracket("unterminated bracket atom", i)
            tokens.append(PrimitiveToken("bracket-atom", smiles[i:j + 1], i))
            i = j + 1
        elif smiles.startswith(("Cl", "Br"), i):
            tokens.append(PrimitiveToken("atom", smiles[i:i + 2], i))
            i += 2
        elif ch in "BCNOPSFI" or ch in AROMATIC_ORGANIC:
            tokens.append(PrimitiveToken("atom", ch, i))
            i += 1
        elif ch in BOND_SYMBOLS:
            tokens.append(PrimitiveToken("bond", ch, i))
            i += 1
        elif ch.isdigit():
            tokens.append(PrimitiveToken("ring-closure", ch, i))
            i += 1
        elif ch == "%":
            digits = smiles[i + 1:i + 3]
            if len(digits) == 2 and digits.isdigit():
                tokens.append(PrimitiveToken("ring-closure", smiles[i:i + 3], i))
                i += 3
            else:
                raise UnknownCharacter("'%' must be followed by two digits", i)
        elif ch == "(":
            tokens.append(PrimitiveToken("branch-open", ch, i))
            i += 1
        elif ch == ")":
            tokens.append(PrimitiveToken("branch-close", ch, i))
            i += 1
        else:
            raise UnknownCharacter(f"unsupported character {ch!r}", i)
    return tokens


# ---------------------------------------------------------------------------
# graph

@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool = False
    charge: int = 0
    hcount: int = 0  # total attached hydrogens (explicit for bracket atoms, implicit otherwise)
    isotope: int | None = None
    chirality: str | None = None
    bracket: bool = False


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: str  # single | double | triple | aromatic


@dataclass(frozen=True)
class MolecularGraph:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    source: str
    _adjacency: tuple = field(default=(), repr=False, compare=False)

    def neighbors(self, i: int) -> list[tuple[int, str]]:
        """(neighbor index, bond order) pairs of atom ``i``."""
        return self._adjacency[i]

    def degree(self, i: int) -> int:
        return len(self._adjacency[i])

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def n_components(self) -> int:
        seen, comps = set(), 0
        for start in range(len(self.atoms)):
            if start in seen:
                continue
            comps += 1
            stack = [start]
            seen.add(start)
            while stack:
                for b, _ in self._adjacency[stack.pop()]:
                    if b not in seen:
                        seen.add(b)
                        stack.append(b)
        return comps

    def ring_count(self) -> int:
        """Cyclomatic number: independent cycles."""
        return len(self.bonds) - len(self.atoms) + self.n_components()

    def ring_bonds(self) -> set[int]:
        """Indices of bonds that lie on at least one cycle."""
        ring = set()
        for bi, bond in enumerate(self.bonds):
            # bond is cyclic iff its endpoints stay connected without it
            seen = {bond.begin}
            stack = [bond.begin]
            found = False
            while stack and not found:
                a = stack.pop()
                for b, _ in self._adjacency[a]:
                    if (a, b) in ((bond.begin, bond.end), (bond.end, bond.begin)):
                        continue
                    if b == bond.end:
                        found = True
                        break
                    if b not in seen:
                        seen.add(b)
                        stack.append(b)
            if found:
                ring.add(bi)
        return ring


_BRACKET_RE = re.compile(
    r"^(?P<iso>\d+)?(?P<sym>[A-Z][a-z]?|[a-z]{1,2})"
    r"(?P<chir>@@|@)?(?P<h>H\d*)?(?P<chg>\+\+|--|[+-]\d*)?(?::\d+)?$"
)


def _parse_bracket(text: str, position: int) -> Atom:
    body = text[1:-1]
    m = _BRACKET_RE.match(body)
    if not m:
        raise ParseError(f"bad bracket atom body {text!r}", position)
    sym = m.group("sym")
    if sym[0].isupper():
        if sym not in ELEMENTS:
            raise ParseError(f"unknown element in {text!r}", position)
        element, aromatic = sym, False
    else:
        if sym not in AROMATIC_BRACKET:
            raise ParseError(f"unknown aromatic element in {text!r}", position)
        element, aromatic = AROMATIC_BRACKET[sym], True
    h = m.group("h")
    hcount = 0 if h is None else (int(h[1:]) if len(h) > 1 else 1)
    chg = m.group("chg")
    if chg is None:
        charge = 0
    elif chg in ("++", "--"):
        charge = 2 if chg == "++" else -2
    else:
        mag = int(chg[1:]) if len(chg) > 1 else 1
        charge = mag if chg[0] == "+" else -mag
    iso = m.group("iso")
    isotope = int(iso) if iso else None
    if isotope == 0:
        raise ParseError(f"isotope must be positive in {text!r}", position)
    return Atom(element, aromatic, charge, hcount, isotope, m.group("chir"), True)


def _kekulize(needs: list[int], edges: dict[int, set[int]]) -> set[int] | None:
    """Return the set of matched atoms if a perfect matching exists."""
    remaining = frozenset(needs)
    failed: set[frozenset] = set()

    def solve(rem: frozenset) -> bool:
        if not rem:
            return True
        if rem in failed:
            return False
        a = min(rem, key=lambda x: (len(edges[x] & rem), x))
        for b in sorted(edges[a] & rem):
            if solve(rem - {a, b}):
                return True
        failed.add(rem)
        return False

    # parity prune per connected component
    todo = set(needs)
    while todo:
        start = todo.pop()
        comp = {start}
        stack = [start]
        while stack:
            x = stack.pop()
            for y in edges[x]:
                if y in todo:
                    todo.discard(y)
                    comp.add(y)
                    stack.append(y)
        if len(comp) % 2:
            return None
    return set(needs) if solve(remaining) else None


def parse(smiles: str) -> MolecularGraph:
    """Parse ``smiles`` into a :class:`MolecularGraph` or raise a :class:`SmilesError`."""
    tokens = tokenize_primitive(smiles)
    atoms: list[Atom] = []
    positions: list[int] = []
    bonds: dict[tuple[int, int], str] = {}
    explicit_bond: dict[tuple[int, int], bool] = {}
    prev: int | None = None
    pending: tuple[str, int] | None = None
    branches: list[tuple[int, int, int]] = []  # (atom, position, atom count at open)
    rings: dict[str, tuple[int, str | None, int]] = {}

    def add_bond(a: int, b: int, symbol: str | None, pos: int):
        if a == b:
            raise ParseError("ring closure bonds an atom to itself", pos)
        key = (min(a, b), max(a, b))
        if key in bonds:
            raise ParseError("duplicate bond between the same atoms", pos)
        if symbol is None:
            order = "aromatic" if atoms[a].aromatic and atoms[b].aromatic else "single"
        else:
            order = BOND_SYMBOLS[symbol]
        bonds[key] = order
        explicit_bond[key] = symbol is not None

    for tok in tokens:
        if tok.kind in ("atom", "bracket-atom"):
            if tok.kind == "atom":
                if tok.text in AROMATIC_ORGANIC:
                    atom = Atom(AROMATIC_ORGANIC[tok.text], aromatic=True)
                else:
                    atom = Atom(tok.text)
            else:
                atom = _parse_bracket(tok.text, tok.position)
            atoms.append(atom)
            positions.append(tok.position)
            idx = len(atoms) - 1
            if prev is not None:
                add_bond(prev, idx, pending[0] if pending else None, tok.position)
            elif pending is not None:
                raise ParseError("bond without a preceding atom", pending[1])
            prev, pending = idx, None
        elif tok.kind == "bond":
            if prev is None:
                raise ParseError("bond without a preceding atom", tok.position)
            if pending is not None:
                raise ParseError("two consecutive bond symbols", tok.position)
            pending = (tok.text, tok.position)
        elif tok.kind == "ring-closure":
            if prev is None:
                raise ParseError("ring closure without a preceding atom", tok.position)
            label = tok.text.lstrip("%")
            symbol = pending[0] if pending else None
            if label in rings:
                other, other_symbol, _ = rings.pop(label)
                if symbol and other_symbol and BOND_SYMBOLS[symbol] != BOND_SYMBOLS[other_symbol]:
                    raise ParseError("conflicting ring-closure bond symbols", tok.position)
                add_bond(prev, other, symbol or other_symbol, tok.position)
            else:
                rings[label] = (prev, symbol, tok.position)
            pending = None
        elif tok.kind == "branch-open":
            if prev is None:
                raise ParseError("branch without a preceding atom", tok.position)
            if pending is not None:
                raise ParseError("bond symbol before a branch", tok.position)
            branches.append((prev, tok.position, len(atoms)))
        else:
            if not branches:
                raise ParseError("unmatched branch close", tok.position)
            if pending is not None:
                raise ParseError("dangling bond at branch close", pending[1])
            anchor, _, count = branches.pop()
            if count == len(atoms):
                raise ParseError("empty branch", tok.position)
            prev = anchor
    if pending is not None:
        raise ParseError("dangling bond at end of input", pending[1])
    if branches:
        raise ParseError("unmatched branch open", branches[-1][1])
    if rings:
        label, (_, _, pos) = min(rings.items(), key=lambda kv: kv[1][2])
        raise ParseError(f"unpaired ring closure {label}", pos)

    adjacency: list[list[tuple[int, str]]] = [[] for _ in atoms]
    for (a, b), order in sorted(bonds.items()):
        adjacency[a].append((b, order))
        adjacency[b].append((a, order))

    # valence bookkeeping: aromatic bonds count 1 until kekulization assigns pi bonds
    used = [sum(BOND_ORDER[o] for _, o in adjacency[i]) + (a.hcount if a.bracket else 0)
            for i, a in enumerate(atoms)]
    needs: list[int] = []
    for i, atom in enumerate(atoms):
        if not atom.aromatic:
            continue
        allowed = allowed_valences(atom.element, atom.charge)
        if allowed is None:
            continue
        fitting = [v for v in allowed if v >= used[i]]
        if fitting and used[i] < fitting[0]:
            needs.append(i)
    aromatic_edges: dict[int, set[int]] = {i: set() for i in needs}
    need_set = set(needs)
    for (a, b), order in bonds.items():
        if order == "aromatic" and a in need_set and b in need_set:
            aromatic_edges[a].add(b)
            aromatic_edges[b].add(a)
    matched = _kekulize(needs, aromatic_edges) if needs else set()
    if matched is None:
        pos = positions[min(needs)]
        raise ParseError("aromatic system cannot be kekulized", pos)

    final: list[Atom] = []
    for i, atom in enumerate(atoms):
        total = used[i] + (1 if i in matched else 0)
        allowed = allowed_valences(atom.element, atom.charge)
        if allowed is not None:
            if not allowed or total > max(allowed):
                raise ParseError(f"valence violation on {atom.element}", positions[i])
            if not atom.bracket:
                target = min(v for v in allowed if v >= total)
                atom = Atom(atom.element, atom.aromatic, atom.charge, target - total,
                            atom.isotope, atom.chirality, False)
        final.append(atom)
    bond_list = tuple(Bond(a, b, o) for (a, b), o in sorted(bonds.items()))
    return MolecularGraph(tuple(final), bond_list, smiles,
                          tuple(tuple(adj) for adj in adjacency))


class Validity(NamedTuple):
    valid: bool
    reason: str | None = None


def is_valid(smiles: str) -> Validity:
    """Never raises; ``reason`` carries the parse failure."""
    if not smiles:
        return Validity(False, "empty input")
    try:
        parse(smiles)
    except SmilesError as exc:
        return Validity(False, str(exc))
    return Validity(True, None)


# ---------------------------------------------------------------------------
# fingerprints

@dataclass(frozen=True)
class Fingerprint:
    bits: np.ndarray  # bool array of length nbits
    radius: int

    @property
    def nbits(self) -> int:
        return int(self.bits.shape[0])

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other):
        return (isinstance(other, Fingerprint) and self.radius == other.radius
                and np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.radius, self.bits.tobytes()))


def atom_invariant(graph: MolecularGraph, i: int) -> tuple[int, ...]:
    atom = graph.atoms[i]
    return (ELEMENTS[atom.element][0], int(atom.aromatic), atom.charge,
            graph.degree(i), atom.hcount)


def fingerprint(graph: MolecularGraph, radius: int = 2, nbits: int = 2048) -> Fingerprint:
    """Circular fingerprint by iterative neighbourhood hashing.

    Round 0 hashes each atom's invariant; every later round rehashes the
    atom's previous identifier with its sorted (bond code, neighbour
    identifier) pairs.  Every identifier from every round sets bit
    ``id % nbits``.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if nbits < 64 or nbits & (nbits - 1):
        raise ValueError("nbits must be a power of two >= 64")
    bits = np.zeros(nbits, dtype=bool)
    ids = [hash_ints(atom_invariant(graph, i)) for i in range(graph.n_atoms)]
    for h in ids:
        bits[h % nbits] = True
    for _ in range(radius):
        new_ids = []
        for i in range(graph.n_atoms):
            env = sorted((_BOND_CODE[order], ids[j]) for j, order in graph.neighbors(i))
            flat = [ids[i]]
            for code, h in env:
                flat.extend((code, h))
            new_ids.append(hash_ints(flat))
        ids = new_ids
        for h in ids:
            bits[h % nbits] = True
    return Fingerprint(bits, radius)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    """|A and B| / |A or B|; 1.0 when both are empty."""
    if a.nbits != b.nbits or a.radius != b.radius:
        raise WidthMismatch(f"fingerprints differ: ({a.nbits}, r={a.radius}) vs ({b.nbits}, r={b.radius})")
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a.bits & b.bits)) / union


def smiles_similarity(x: str, y: str, radius: int = 2, nbits: int = 2048) -> float:
    return tanimoto(fingerprint(parse(x), radius, nbits), fingerprint(parse(y), radius, nbits))
