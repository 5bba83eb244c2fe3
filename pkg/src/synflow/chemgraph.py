"""Molecular graphs without external chemistry dependencies.

Provides a restricted SMILES parser, canonical SMILES writing via iterative
invariant refinement, circular (ECFP-style) fingerprints, Tanimoto similarity
and Bemis-Murcko scaffold extraction. Supported elements are the organic
subset B, C, N, O, P, S, F, Cl, Br, I; aromaticity is notation-driven
(lowercase / ':' bonds), stereochemistry is stripped, isotopes and wildcards
are rejected.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

ELEMENTS = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC_ELEMENTS = ("C", "N", "O", "S")

# Allowed valence states per element; implicit hydrogens fill up to the
# smallest state that accommodates the explicit bonds.
VALENCES = {
    "B": (3,),
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}

_TWO_LETTER = ("Cl", "Br")


def _charged_valences(element: str, charge: int) -> tuple[int, ...]:
    """Valence states shifted by formal charge (cationic N binds four, etc.)."""
    if charge == 0:
        return VALENCES[element]
    if element == "C":
        adjust = -abs(charge)
    elif element == "B":
        adjust = -charge
    else:  # N, O, P, S, halogens: charge adds binding capacity with its sign
        adjust = charge
    return tuple(v + adjust for v in VALENCES[element] if v + adjust >= 0)


class ChemError(ValueError):
    """Base error for molecular graph construction and parsing."""


class SmilesError(ChemError):
    """Malformed SMILES input; carries the offending string offset."""

    def __init__(self, message: str, offset: int = -1):
        self.offset = offset
        if offset >= 0:
            message = f"{message} (offset {offset})"
        super().__init__(message)


class ValenceError(ChemError):
    """Atom exceeds its allowed valence."""


class MultiFragmentError(ChemError):
    """Operation requires a single-fragment molecule."""


class BondOrder(enum.Enum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4


# Contribution of each bond to the valence sum (aromatic counts as one; the
# pi system adds one more for aromatic C/N, handled separately).
_ORDER_VALENCE = {
    BondOrder.SINGLE: 1,
    BondOrder.DOUBLE: 2,
    BondOrder.TRIPLE: 3,
    BondOrder.AROMATIC: 1,
}

_BOND_CHAR = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE,
              "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}
_CHAR_FOR_ORDER = {BondOrder.DOUBLE: "=", BondOrder.TRIPLE: "#"}


@dataclass(frozen=True)
class Atom:
    """One heavy atom; hydrogens are counts, never graph nodes."""

    element: str
    aromatic: bool = False
    formal_charge: int = 0
    explicit_h: Optional[int] = None


@dataclass(frozen=True)
class Bond:
    """Undirected bond between atom indices (stored with a < b)."""

    a: int
    b: int
    order: BondOrder = BondOrder.SINGLE

    def __post_init__(self):
        if self.a == self.b:
            raise ChemError(f"bond endpoints must differ, got {self.a}")
        if self.a > self.b:
            lo, hi = self.b, self.a
            object.__setattr__(self, "a", lo)
            object.__setattr__(self, "b", hi)

    def other(self, idx: int) -> int:
        return self.b if idx == self.a else self.a


class MolGraph:
    """Attributed molecular graph, immutable after construction.

    Construction validates element membership, duplicate bonds, aromatic
    consistency and valence, and computes per-atom hydrogen counts.
    """

    __slots__ = ("atoms", "bonds", "hydrogens", "stereo_stripped",
                 "_adjacency", "_canonical", "_ring_atoms", "_fp_cache")

    def __init__(self, atoms: Sequence[Atom], bonds: Sequence[Bond],
                 stereo_stripped: bool = False):
        self.atoms = tuple(atoms)
        self.bonds = tuple(bonds)
        self.stereo_stripped = stereo_stripped
        self._canonical: Optional[str] = None
        self._ring_atoms: Optional[frozenset] = None
        self._fp_cache: dict = {}
        self._validate_topology()
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for bi, bond in enumerate(self.bonds):
            adj[bond.a].append((bond.b, bi))
            adj[bond.b].append((bond.a, bi))
        self._adjacency = tuple(tuple(sorted(n)) for n in adj)
        self.hydrogens = tuple(self._hydrogen_count(i) for i in range(len(self.atoms)))
        self._validate_chemistry()

    # -- validation -------------------------------------------------------

    def _validate_topology(self):
        n = len(self.atoms)
        seen = set()
        for atom in self.atoms:
            if atom.element not in VALENCES:
                raise ChemError(f"unknown element {atom.element!r}")
            if atom.aromatic and atom.element not in AROMATIC_ELEMENTS:
                raise ChemError(f"element {atom.element} cannot be aromatic")
            if atom.explicit_h is not None and atom.explicit_h < 0:
                raise ChemError("negative explicit hydrogen count")
        for bond in self.bonds:
            if not (0 <= bond.a < n and 0 <= bond.b < n):
                raise ChemError(f"bond index out of range: {bond.a}-{bond.b}")
            key = (bond.a, bond.b)
            if key in seen:
                raise ChemError(f"duplicate bond {bond.a}-{bond.b}")
            seen.add(key)

    def _bond_valence_sum(self, idx: int, pi_adjust: bool) -> int:
        total = 0
        for _, bi in self._adjacency[idx]:
            total += _ORDER_VALENCE[self.bonds[bi].order]
        atom = self.atoms[idx]
        if pi_adjust and atom.aromatic and atom.element in ("C", "N"):
            total += 1
        return total

    def _hydrogen_count(self, idx: int) -> int:
        atom = self.atoms[idx]
        if atom.explicit_h is not None:
            return atom.explicit_h
        used = self._bond_valence_sum(idx, pi_adjust=True)
        for valence in _charged_valences(atom.element, atom.formal_charge):
            if used <= valence:
                return valence - used
        raise ValenceError(
            f"atom {idx} ({atom.element}, charge {atom.formal_charge}) has bond "
            f"order sum {used} exceeding allowed valences")

    def _validate_chemistry(self):
        for idx, atom in enumerate(self.atoms):
            total = self._bond_valence_sum(idx, pi_adjust=False) + self.hydrogens[idx]
            limit = max(VALENCES[atom.element]) + abs(atom.formal_charge)
            if total > limit:
                raise ValenceError(
                    f"atom {idx} ({atom.element}, charge {atom.formal_charge}) "
                    f"valence {total} exceeds allowed {limit}")
        for bond in self.bonds:
            if bond.order is BondOrder.AROMATIC:
                if not (self.atoms[bond.a].aromatic and self.atoms[bond.b].aromatic):
                    raise ChemError(
                        f"aromatic bond {bond.a}-{bond.b} between non-aromatic atoms")
        ring = self.ring_atoms()
        for idx, atom in enumerate(self.atoms):
            if atom.aromatic and idx not in ring:
                raise ChemError(f"aromatic atom {idx} is not in a ring")

    # -- topology queries --------------------------------------------------

    def __len__(self) -> int:
        return len(self.atoms)

    @property
    def is_empty(self) -> bool:
        return not self.atoms

    def neighbors(self, idx: int) -> tuple[tuple[int, int], ...]:
        """(neighbor index, bond index) pairs, sorted by neighbor."""
        return self._adjacency[idx]

    def degree(self, idx: int) -> int:
        return len(self._adjacency[idx])

    def total_h(self, idx: int) -> int:
        return self.hydrogens[idx]

    def bond_between(self, a: int, b: int) -> Optional[Bond]:
        for nbr, bi in self._adjacency[a]:
            if nbr == b:
                return self.bonds[bi]
        return None

    def ring_atoms(self) -> frozenset:
        """Indices of atoms on at least one cycle (via bridge detection)."""
        if self._ring_atoms is not None:
            return self._ring_atoms
        n = len(self.atoms)
        disc = [-1] * n
        low = [0] * n
        bridges = set()
        counter = 0
        for root in range(n):
            if disc[root] >= 0:
                continue
            stack = [(root, -1, iter(self._adjacency[root]))]
            disc[root] = low[root] = counter
            counter += 1
            while stack:
                node, parent_bond, it = stack[-1]
                advanced = False
                for nbr, bi in it:
                    if bi == parent_bond:
                        continue
                    if disc[nbr] < 0:
                        disc[nbr] = low[nbr] = counter
                        counter += 1
                        stack.append((nbr, bi, iter(self._adjacency[nbr])))
                        advanced = True
                        break
                    low[node] = min(low[node], disc[nbr])
                if not advanced:
                    stack.pop()
                    if stack:
                        pnode = stack[-1][0]
                        low[pnode] = min(low[pnode], low[node])
                        if low[node] > disc[pnode]:
                            bridges.add(parent_bond)
        members = set()
        # in an undirected graph, non-bridge edges are exactly the cycle edges
        for bi, bond in enumerate(self.bonds):
            if bi not in bridges:
                members.add(bond.a)
                members.add(bond.b)
        self._ring_atoms = frozenset(members)
        return self._ring_atoms

    def connected_components(self) -> list[list[int]]:
        seen = [False] * len(self.atoms)
        comps = []
        for start in range(len(self.atoms)):
            if seen[start]:
                continue
            queue = [start]
            seen[start] = True
            comp = []
            while queue:
                node = queue.pop()
                comp.append(node)
                for nbr, _ in self._adjacency[node]:
                    if not seen[nbr]:
                        seen[nbr] = True
                        queue.append(nbr)
            comps.append(sorted(comp))
        return comps

    def is_single_fragment(self) -> bool:
        return len(self.connected_components()) == 1

    def subgraph(self, keep: Iterable[int]) -> "MolGraph":
        """Induced subgraph over `keep`, atoms reindexed in given order."""
        keep = list(keep)
        remap = {old: new for new, old in enumerate(keep)}
        atoms = [self.atoms[i] for i in keep]
        bonds = [Bond(remap[b.a], remap[b.b], b.order)
                 for b in self.bonds if b.a in remap and b.b in remap]
        return MolGraph(atoms, bonds, stereo_stripped=self.stereo_stripped)

    def fragments(self) -> list["MolGraph"]:
        return [self.subgraph(comp) for comp in self.connected_components()]

    def permuted(self, order: Sequence[int]) -> "MolGraph":
        """New graph with atoms listed in `order` (a permutation of indices)."""
        if sorted(order) != list(range(len(self.atoms))):
            raise ChemError("order must be a permutation of atom indices")
        remap = {old: new for new, old in enumerate(order)}
        atoms = [self.atoms[i] for i in order]
        bonds = [Bond(remap[b.a], remap[b.b], b.order) for b in self.bonds]
        return MolGraph(atoms, bonds, stereo_stripped=self.stereo_stripped)

    def __repr__(self):
        try:
            return f"MolGraph({write_canonical_smiles_any(self)!r})"
        except ChemError:
            return f"MolGraph(<{len(self.atoms)} atoms, {len(self.bonds)} bonds>)"


EMPTY_MOL = MolGraph([], [])


# -- SMILES parsing ---------------------------------------------------------


def parse_smiles(text: str) -> MolGraph:
    """Parse restricted SMILES into a MolGraph.

    Grammar: organic-subset bare atoms, aromatic lowercase c/n/o/s, bracket
    atoms with H-count and charge, branches, ring closures (digit or %nn)
    and bond symbols - = # :. Stereo markers are stripped (flag set on the
    result); isotopes, wildcards and fragment dots are rejected.
    """
    atoms: list[Atom] = []
    bonds: list[Bond] = []
    prev: Optional[int] = None
    pending: Optional[BondOrder] = None
    branch_stack: list[Optional[int]] = []
    open_rings: dict[int, tuple[int, Optional[BondOrder], int]] = {}
    stripped = False
    i = 0
    n = len(text)

    def attach(new_idx: int, pos: int):
        nonlocal prev, pending
        if prev is not None:
            order = pending
            if order is None:
                order = (BondOrder.AROMATIC
                         if atoms[prev].aromatic and atoms[new_idx].aromatic
                         else BondOrder.SINGLE)
            bonds.append(Bond(prev, new_idx, order))
        elif pending is not None:
            raise SmilesError("bond symbol with no preceding atom", pos)
        pending = None
        prev = new_idx

    while i < n:
        ch = text[i]
        if ch == "(":
            if prev is None:
                raise SmilesError("branch opened before any atom", i)
            if pending is not None:
                raise SmilesError("dangling bond before '('", i)
            branch_stack.append(prev)
            i += 1
        elif ch == ")":
            if not branch_stack:
                raise SmilesError("unbalanced branch close", i)
            if pending is not None:
                raise SmilesError("dangling bond before ')'", i)
            prev = branch_stack.pop()
            i += 1
        elif ch in _BOND_CHAR:
            if pending is not None:
                raise SmilesError("two consecutive bond symbols", i)
            pending = _BOND_CHAR[ch]
            i += 1
        elif ch in "/\\":
            stripped = True
            if pending is None:
                pending = BondOrder.SINGLE
            i += 1
        elif ch.isdigit() or ch == "%":
            if prev is None:
                raise SmilesError("ring closure before any atom", i)
            if ch == "%":
                if i + 2 >= n or not text[i + 1: i + 3].isdigit():
                    raise SmilesError("'%' needs two digits", i)
                num = int(text[i + 1: i + 3])
                i += 3
            else:
                num = int(ch)
                i += 1
            if num in open_rings:
                other, other_order, opened_at = open_rings.pop(num)
                if other == prev:
                    raise SmilesError(f"ring closure {num} bonds atom to itself", i - 1)
                order = pending if pending is not None else other_order
                if (pending is not None and other_order is not None
                        and pending is not other_order):
                    raise SmilesError(f"conflicting bond orders on ring closure {num}", i - 1)
                if order is None:
                    order = (BondOrder.AROMATIC
                             if atoms[prev].aromatic and atoms[other].aromatic
                             else BondOrder.SINGLE)
                bonds.append(Bond(prev, other, order))
                pending = None
            else:
                open_rings[num] = (prev, pending, i - 1)
                pending = None
        elif ch == ".":
            raise SmilesError("fragment separator '.' not supported", i)
        elif ch == "*":
            raise SmilesError("wildcard atoms rejected", i)
        elif ch == "[":
            atom, consumed, saw_stereo = _parse_bracket(text, i)
            stripped = stripped or saw_stereo
            atoms.append(atom)
            attach(len(atoms) - 1, i)
            i += consumed
        else:
            sym = None
            for two in _TWO_LETTER:
                if text.startswith(two, i):
                    sym = two
                    break
            if sym is None and ch.upper() in "BCNOPSFI":
                sym = ch
            if sym is None:
                raise SmilesError(f"unexpected character {ch!r}", i)
            aromatic = sym.islower()
            element = sym.capitalize()
            if aromatic and element not in AROMATIC_ELEMENTS:
                raise SmilesError(f"{element} cannot be aromatic", i)
            atoms.append(Atom(element, aromatic=aromatic))
            attach(len(atoms) - 1, i)
            i += len(sym)

    if branch_stack:
        raise SmilesError("unbalanced branch", n - 1)
    if open_rings:
        num, (_, _, opened_at) = sorted(open_rings.items())[0]
        raise SmilesError(f"unclosed ring closure {num}", opened_at)
    if pending is not None:
        raise SmilesError("dangling bond at end of input", n - 1)
    try:
        return MolGraph(atoms, bonds, stereo_stripped=stripped)
    except SmilesError:
        raise
    except ChemError as exc:
        raise SmilesError(str(exc), n - 1) from exc


def _parse_bracket(text: str, start: int) -> tuple[Atom, int, bool]:
    end = text.find("]", start)
    if end < 0:
        raise SmilesError("unterminated bracket atom", start)
    body = text[start + 1: end]
    i = 0
    saw_stereo = False
    if not body:
        raise SmilesError("empty bracket atom", start)
    if body[0].isdigit():
        raise SmilesError("isotopes not supported", start + 1)
    if body[0] == "*":
        raise SmilesError("wildcard atoms rejected", start + 1)
    sym = None
    for two in _TWO_LETTER:
        if body.startswith(two):
            sym = two
            break
    if sym is None and body[0].upper() in "BCNOPSFI":
        sym = body[0]
    if sym is None:
        raise SmilesError(f"unknown element in bracket: {body!r}", start + 1)
    aromatic = sym.islower()
    element = sym.capitalize()
    if aromatic and element not in AROMATIC_ELEMENTS:
        raise SmilesError(f"{element} cannot be aromatic", start + 1)
    i = len(sym)
    while i < len(body) and body[i] == "@":
        saw_stereo = True
        i += 1
    explicit_h = 0
    if i < len(body) and body[i] == "H":
        i += 1
        digits = ""
        while i < len(body) and body[i].isdigit():
            digits += body[i]
            i += 1
        explicit_h = int(digits) if digits else 1
    charge = 0
    if i < len(body) and body[i] in "+-":
        sign = 1 if body[i] == "+" else -1
        run = 0
        while i < len(body) and body[i] in "+-":
            if (body[i] == "+") != (sign > 0):
                raise SmilesError("mixed charge signs", start + 1 + i)
            run += 1
            i += 1
        digits = ""
        while i < len(body) and body[i].isdigit():
            digits += body[i]
            i += 1
        if digits and run > 1:
            raise SmilesError("charge count after repeated sign", start + 1 + i)
        charge = sign * (int(digits) if digits else run)
    if i != len(body):
        raise SmilesError(f"unexpected {body[i]!r} in bracket atom", start + 1 + i)
    return Atom(element, aromatic=aromatic, formal_charge=charge,
                explicit_h=explicit_h), end - start + 1, saw_stereo


# -- canonical SMILES -------------------------------------------------------


def _dense_ranks(keys: list) -> list[int]:
    order = {key: rank for rank, key in enumerate(sorted(set(keys)))}
    return [order[key] for key in keys]


def _refine_ranks(mol: MolGraph, ranks: list[int]) -> list[int]:
    while True:
        keys = []
        for idx in range(len(mol.atoms)):
            nbr = tuple(sorted((mol.bonds[bi].order.value, ranks[j])
                               for j, bi in mol.neighbors(idx)))
            keys.append((ranks[idx], nbr))
        new = _dense_ranks(keys)
        if new == ranks:
            return new
        ranks = new


def _initial_ranks(mol: MolGraph) -> list[int]:
    keys = [(a.element, mol.degree(i), a.formal_charge, a.aromatic, mol.total_h(i))
            for i, a in enumerate(mol.atoms)]
    return _refine_ranks(mol, _dense_ranks(keys))


def _canonical_string(mol: MolGraph, ranks: list[int]) -> str:
    n = len(mol.atoms)
    if len(set(ranks)) == n:
        return _write_with_ranks(mol, ranks)
    # break the lowest tied class; take the lexicographically smallest
    # outcome over all candidates so the result is permutation invariant
    by_rank: dict[int, list[int]] = {}
    for idx, rank in enumerate(ranks):
        by_rank.setdefault(rank, []).append(idx)
    tied_rank = min(r for r, members in by_rank.items() if len(members) > 1)
    best = None
    for candidate in by_rank[tied_rank]:
        trial = [r * 2 + 1 for r in ranks]
        trial[candidate] -= 1
        result = _canonical_string(mol, _refine_ranks(mol, _dense_ranks(trial)))
        if best is None or result < best:
            best = result
    return best


def _atom_token(mol: MolGraph, idx: int) -> str:
    atom = mol.atoms[idx]
    symbol = atom.element.lower() if atom.aromatic else atom.element
    h = mol.total_h(idx)
    if atom.formal_charge == 0:
        implied = _bare_implied_h(mol, idx)
        if implied == h:
            return symbol
    parts = ["[", symbol]
    if h == 1:
        parts.append("H")
    elif h > 1:
        parts.append(f"H{h}")
    c = atom.formal_charge
    if c == 1:
        parts.append("+")
    elif c == -1:
        parts.append("-")
    elif c > 1:
        parts.append(f"+{c}")
    elif c < -1:
        parts.append(f"-{-c}")
    parts.append("]")
    return "".join(parts)


def _bare_implied_h(mol: MolGraph, idx: int) -> Optional[int]:
    """Hydrogens a bare (bracket-free) atom would get when re-parsed."""
    atom = mol.atoms[idx]
    used = mol._bond_valence_sum(idx, pi_adjust=True)
    for valence in VALENCES[atom.element]:
        if used <= valence:
            return valence - used
    return None


def _bond_token(mol: MolGraph, bond: Bond) -> str:
    if bond.order in _CHAR_FOR_ORDER:
        return _CHAR_FOR_ORDER[bond.order]
    both_aromatic = mol.atoms[bond.a].aromatic and mol.atoms[bond.b].aromatic
    if bond.order is BondOrder.SINGLE and both_aromatic:
        return "-"
    return ""  # implicit single, or aromatic between aromatic atoms


def _write_with_ranks(mol: MolGraph, ranks: list[int]) -> str:
    n = len(mol.atoms)
    root = ranks.index(min(ranks))
    # DFS spanning tree, children in rank order; leftover edges close rings
    parent_bond = {root: None}
    children: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n)}
    ring_bonds: list[int] = []
    visited = {root}
    order_visit = [root]
    stack = [(root, iter(sorted(mol.neighbors(root), key=lambda p: ranks[p[0]])))]
    seen_bonds = set()
    while stack:
        node, it = stack[-1]
        progressed = False
        for nbr, bi in it:
            if bi in seen_bonds:
                continue
            seen_bonds.add(bi)
            if nbr in visited:
                ring_bonds.append(bi)
                continue
            visited.add(nbr)
            order_visit.append(nbr)
            parent_bond[nbr] = bi
            children[node].append((nbr, bi))
            stack.append((nbr, iter(sorted(mol.neighbors(nbr), key=lambda p: ranks[p[0]]))))
            progressed = True
            break
        if not progressed:
            stack.pop()
    if len(visited) != n:
        raise MultiFragmentError("cannot write SMILES for multi-fragment graph")

    # ring closure digits: opened at the earlier-visited endpoint,
    # allocated in visit order so output is deterministic
    visit_pos = {node: pos for pos, node in enumerate(order_visit)}
    events: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n)}
    for bi in ring_bonds:
        bond = mol.bonds[bi]
        first, second = sorted((bond.a, bond.b), key=lambda x: visit_pos[x])
        events[first].append((bi, second))
    free_digits = list(range(1, 100))
    opens: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n)}
    closes: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n)}
    for node in order_visit:
        for bi, second in sorted(events[node], key=lambda e: visit_pos[e[1]]):
            digit = free_digits.pop(0)
            opens[node].append((digit, bi))
            closes[second].append((digit, bi))

    def digit_str(d: int) -> str:
        return str(d) if d < 10 else f"%{d:02d}"

    out: list[str] = []

    def emit(node: int):
        out.append(_atom_token(mol, node))
        for digit, bi in sorted(opens[node]):
            out.append(_bond_token(mol, mol.bonds[bi]))
            out.append(digit_str(digit))
        for digit, bi in sorted(closes[node]):
            out.append(digit_str(digit))
        kids = children[node]
        for pos, (kid, bi) in enumerate(kids):
            token = _bond_token(mol, mol.bonds[bi])
            if pos < len(kids) - 1:
                out.append("(")
                out.append(token)
                emit(kid)
                out.append(")")
            else:
                out.append(token)
                emit(kid)

    emit(root)
    return "".join(out)


def write_canonical_smiles(mol: MolGraph) -> str:
    """Canonical SMILES, invariant to input atom ordering.

    Raises MultiFragmentError for disconnected graphs; callers split
    fragments first. The empty graph canonicalizes to the empty string.
    """
    if mol._canonical is not None:
        return mol._canonical
    if mol.is_empty:
        return ""
    if not mol.is_single_fragment():
        raise MultiFragmentError("write_canonical_smiles requires a single fragment")
    mol._canonical = _canonical_string(mol, _initial_ranks(mol))
    return mol._canonical


def write_canonical_smiles_any(mol: MolGraph) -> str:
    """Canonical form for possibly multi-fragment graphs (dot-joined, sorted)."""
    if mol.is_empty:
        return ""
    return ".".join(sorted(write_canonical_smiles(f) for f in mol.fragments()))


# -- circular fingerprints --------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def _hash_ints(values: Iterable[int]) -> int:
    out = bytearray()
    for v in values:
        out += int(v).to_bytes(8, "little", signed=False)
    return _fnv1a64(bytes(out))


@dataclass(frozen=True, eq=False)
class Fingerprint:
    """Folded binary circular fingerprint."""

    bits: np.ndarray
    nbits: int
    radius: int

    def popcount(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        return (isinstance(other, Fingerprint) and self.nbits == other.nbits
                and self.radius == other.radius
                and bool(np.array_equal(self.bits, other.bits)))


def morgan_fingerprint(mol: MolGraph, radius: int = 2, nbits: int = 2048) -> Fingerprint:
    """ECFP-style fingerprint from iterated neighborhood hashing.

    Initial atom identifiers hash (element, degree, charge, aromatic,
    H-count); each round rehashes with the sorted (bond order, neighbor id)
    list. All identifiers from rounds 0..radius are folded modulo nbits.
    Deterministic and independent of atom ordering; the empty molecule maps
    to the all-zero vector.
    """
    if radius < 0:
        raise ChemError("radius must be >= 0")
    if nbits < 64 or nbits & (nbits - 1):
        raise ChemError("nbits must be a power of two >= 64")
    key = (radius, nbits)
    cached = mol._fp_cache.get(key)
    if cached is not None:
        return cached
    bits = np.zeros(nbits, dtype=np.uint8)
    ids = []
    for idx, atom in enumerate(mol.atoms):
        ids.append(_hash_ints([
            ELEMENTS.index(atom.element), mol.degree(idx),
            atom.formal_charge + 16, int(atom.aromatic), mol.total_h(idx)]))
    for ident in ids:
        bits[ident % nbits] = 1
    for _ in range(radius):
        nxt = []
        for idx in range(len(mol.atoms)):
            env = sorted((mol.bonds[bi].order.value, ids[j])
                         for j, bi in mol.neighbors(idx))
            flat = [ids[idx]]
            for order, nid in env:
                flat += [order, nid]
            nxt.append(_hash_ints(flat))
        ids = nxt
        for ident in ids:
            bits[ident % nbits] = 1
    fp = Fingerprint(bits=bits, nbits=nbits, radius=radius)
    mol._fp_cache[key] = fp
    return fp


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    """|a AND b| / |a OR b|; 1.0 when both vectors are all-zero."""
    if a.nbits != b.nbits:
        raise ChemError(f"fingerprint length mismatch: {a.nbits} vs {b.nbits}")
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(a.bits, b.bits).sum())
    return inter / union


# -- scaffolds and counts -----------------------------------------------------


def bemis_murcko_scaffold(mol: MolGraph) -> MolGraph:
    """Ring systems plus linkers; empty graph for acyclic molecules.

    Iteratively removes degree-1 atoms unless they are attached by a double
    or triple bond (exocyclic =O and the like are retained).
    """
    if mol.is_empty:
        return mol
    if not mol.is_single_fragment():
        raise MultiFragmentError("scaffold requires a single fragment")
    if not mol.ring_atoms():
        return EMPTY_MOL
    keep = list(range(len(mol.atoms)))
    current = mol
    while True:
        removable = [i for i in range(len(current.atoms))
                     if current.degree(i) == 1
                     and current.bonds[current.neighbors(i)[0][1]].order
                     in (BondOrder.SINGLE, BondOrder.AROMATIC)]
        if not removable:
            return current
        drop = set(removable)
        keep = [i for i in range(len(current.atoms)) if i not in drop]
        current = current.subgraph(keep)


def heavy_atom_count(mol: MolGraph) -> int:
    """Number of non-hydrogen atoms (hydrogens are never graph nodes)."""
    return len(mol.atoms)


# -- file formats -------------------------------------------------------------


def read_building_blocks(path) -> list[tuple[str, MolGraph]]:
    """Read `SMILES<TAB>optional-id` lines; '#' comments and blanks ignored.

    Returns (id, MolGraph) pairs; the id defaults to the SMILES text.
    """
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            smiles = parts[0].strip()
            label = parts[1].strip() if len(parts) > 1 and parts[1].strip() else smiles
            try:
                mol = parse_smiles(smiles)
            except ChemError as exc:
                raise ChemError(f"{path}:{lineno}: {exc}") from exc
            records.append((label, mol))
    return records
