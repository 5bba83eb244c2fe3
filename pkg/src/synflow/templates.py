"""Reaction templates: a restricted SMARTS-like rewrite language.

A template reads `R1>>P` or `R1.R2>>P`. Pattern atoms are bare element
symbols (case encodes aromaticity) or bracketed conjunctions joined by ';',
e.g. `[C;H1:2]`. Supported primitives: element symbol, `#n` atomic number
(aromaticity unconstrained), `Hn` total hydrogen count, `Xn` heavy-atom
degree, `R` / `R0` ring membership, `+`/`-` charges, and a trailing `:n`
atom map. Pattern bonds are `-`, `=`, `#`, `:`; an unwritten bond matches
single or aromatic and instantiates as single.

Atoms mapped on both sides are preserved through the rewrite; unmapped atoms
that share a unique local signature across sides are paired automatically,
the rest are deleted (reactant side) or created (product side). Properties
of preserved atoms are overwritten by the target side's constraints; an
unconstrained charge resets to zero and an unconstrained hydrogen count is
recomputed from valence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .chemgraph import (Atom, Bond, BondOrder, ChemError, MolGraph,
                        AROMATIC_ELEMENTS, write_canonical_smiles)

_ATOMIC_NUMBERS = {5: "B", 6: "C", 7: "N", 8: "O", 9: "F", 15: "P",
                   16: "S", 17: "Cl", 35: "Br", 53: "I"}
_TWO_LETTER = ("Cl", "Br")
_BOND_CHAR = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE,
              "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}


class TemplateError(ChemError):
    """Malformed reaction template."""


class TemplateNotApplicable(ChemError):
    """Template has no embedding into the given reactants."""


@dataclass(frozen=True)
class AtomPattern:
    """Conjunction of constraints one molecule atom must satisfy."""

    element: Optional[str] = None
    aromatic: Optional[bool] = None
    charge: Optional[int] = None
    h_count: Optional[int] = None
    connectivity: Optional[int] = None  # heavy-atom degree
    in_ring: Optional[bool] = None
    map_index: Optional[int] = None

    def is_wildcard(self) -> bool:
        return self.element is None

    def matches(self, mol: MolGraph, idx: int) -> bool:
        atom = mol.atoms[idx]
        if self.element is not None and atom.element != self.element:
            return False
        if self.aromatic is not None and atom.aromatic != self.aromatic:
            return False
        if self.charge is not None and atom.formal_charge != self.charge:
            return False
        if self.h_count is not None and mol.total_h(idx) != self.h_count:
            return False
        if self.connectivity is not None and mol.degree(idx) != self.connectivity:
            return False
        if self.in_ring is not None and (idx in mol.ring_atoms()) != self.in_ring:
            return False
        return True


@dataclass(frozen=True)
class PatternBond:
    a: int
    b: int
    order: Optional[BondOrder] = None  # None: single-or-aromatic

    def matches(self, order: BondOrder) -> bool:
        if self.order is None:
            return order in (BondOrder.SINGLE, BondOrder.AROMATIC)
        return order is self.order

    @property
    def concrete_order(self) -> BondOrder:
        return self.order if self.order is not None else BondOrder.SINGLE


class PatternGraph:
    """Connected graph of atom patterns."""

    def __init__(self, atoms: Sequence[AtomPattern], bonds: Sequence[PatternBond]):
        self.atoms = tuple(atoms)
        self.bonds = tuple(bonds)
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for bi, bond in enumerate(self.bonds):
            adj[bond.a].append((bond.b, bi))
            adj[bond.b].append((bond.a, bi))
        self.adjacency = tuple(tuple(sorted(n)) for n in adj)

    def __len__(self):
        return len(self.atoms)

    def bond_between(self, a: int, b: int) -> Optional[PatternBond]:
        for nbr, bi in self.adjacency[a]:
            if nbr == b:
                return self.bonds[bi]
        return None


Embedding = tuple  # pattern atom index -> molecule atom index


# -- pattern parsing ----------------------------------------------------------


def _parse_bracket_pattern(body: str, offset: int) -> AtomPattern:
    tail = body
    map_index = None
    if ":" in body:
        head, _, map_part = body.rpartition(":")
        if not map_part.isdigit():
            raise TemplateError(f"bad atom map in [{body}] (offset {offset})")
        map_index = int(map_part)
        if map_index <= 0:
            raise TemplateError(f"atom map must be positive in [{body}]")
        tail = head
    fields = {"element": None, "aromatic": None, "charge": None,
              "h_count": None, "connectivity": None, "in_ring": None}

    def set_once(key, value):
        if fields[key] is not None:
            raise TemplateError(f"duplicate {key} constraint in [{body}]")
        fields[key] = value

    for chunk in tail.split(";"):
        chunk = chunk.strip()
        if not chunk:
            raise TemplateError(f"empty constraint in [{body}]")
        i = 0
        while i < len(chunk):
            ch = chunk[i]
            if ch == "*":
                i += 1  # wildcard: no constraint; rejected later per side
                continue
            if ch == "#":
                j = i + 1
                while j < len(chunk) and chunk[j].isdigit():
                    j += 1
                if j == i + 1:
                    raise TemplateError(f"bad atomic number in [{body}]")
                num = int(chunk[i + 1: j])
                if num not in _ATOMIC_NUMBERS:
                    raise TemplateError(f"unsupported atomic number {num} in [{body}]")
                set_once("element", _ATOMIC_NUMBERS[num])
                i = j
                continue
            if ch == "H":  # hydrogen count (H itself is not an allowed element)
                j = i + 1
                while j < len(chunk) and chunk[j].isdigit():
                    j += 1
                set_once("h_count", int(chunk[i + 1: j]) if j > i + 1 else 1)
                i = j
                continue
            if ch == "X":
                j = i + 1
                while j < len(chunk) and chunk[j].isdigit():
                    j += 1
                if j == i + 1:
                    raise TemplateError(f"'X' needs a count in [{body}]")
                set_once("connectivity", int(chunk[i + 1: j]))
                i = j
                continue
            if ch == "R":
                if i + 1 < len(chunk) and chunk[i + 1] == "0":
                    set_once("in_ring", False)
                    i += 2
                else:
                    set_once("in_ring", True)
                    i += 1
                continue
            if ch in "+-":
                sign = 1 if ch == "+" else -1
                run = 0
                while i < len(chunk) and chunk[i] == ch:
                    run += 1
                    i += 1
                j = i
                while j < len(chunk) and chunk[j].isdigit():
                    j += 1
                if j > i:
                    if run > 1:
                        raise TemplateError(f"bad charge in [{body}]")
                    set_once("charge", sign * int(chunk[i:j]))
                    i = j
                else:
                    set_once("charge", sign * run)
                continue
            sym = None
            for two in _TWO_LETTER:
                if chunk.startswith(two, i):
                    sym = two
                    break
            if sym is None and ch.upper() in "BCNOPSFI":
                sym = ch
            if sym is None:
                raise TemplateError(f"unknown constraint {chunk[i:]!r} in [{body}]")
            aromatic = sym.islower()
            element = sym.capitalize()
            if aromatic and element not in AROMATIC_ELEMENTS:
                raise TemplateError(f"{element} cannot be aromatic in [{body}]")
            set_once("element", element)
            set_once("aromatic", aromatic)
            i += len(sym)
    return AtomPattern(map_index=map_index, **fields)


def _parse_pattern_side(text: str) -> PatternGraph:
    atoms: list[AtomPattern] = []
    bonds: list[PatternBond] = []
    prev: Optional[int] = None
    pending: Optional[BondOrder] = None
    pending_explicit = False
    branch_stack: list[int] = []
    open_rings: dict[int, tuple[int, Optional[BondOrder], bool]] = {}
    i = 0
    n = len(text)

    def attach(new_idx: int):
        nonlocal prev, pending, pending_explicit
        if prev is not None:
            order = pending if pending_explicit else None
            bonds.append(PatternBond(prev, new_idx, order))
        elif pending_explicit:
            raise TemplateError(f"bond with no preceding atom in {text!r}")
        pending = None
        pending_explicit = False
        prev = new_idx

    while i < n:
        ch = text[i]
        if ch == "(":
            if prev is None:
                raise TemplateError(f"branch before any atom in {text!r}")
            branch_stack.append(prev)
            i += 1
        elif ch == ")":
            if not branch_stack:
                raise TemplateError(f"unbalanced ')' in {text!r}")
            prev = branch_stack.pop()
            i += 1
        elif ch in _BOND_CHAR:
            pending = _BOND_CHAR[ch]
            pending_explicit = True
            i += 1
        elif ch.isdigit():
            if prev is None:
                raise TemplateError(f"ring closure before any atom in {text!r}")
            num = int(ch)
            if num in open_rings:
                other, other_order, other_explicit = open_rings.pop(num)
                order = pending if pending_explicit else (
                    other_order if other_explicit else None)
                bonds.append(PatternBond(prev, other, order))
            else:
                open_rings[num] = (prev, pending, pending_explicit)
            pending = None
            pending_explicit = False
            i += 1
        elif ch == "[":
            end = text.find("]", i)
            if end < 0:
                raise TemplateError(f"unterminated bracket in {text!r}")
            atoms.append(_parse_bracket_pattern(text[i + 1: end], i))
            attach(len(atoms) - 1)
            i = end + 1
        elif ch == "*":
            atoms.append(AtomPattern())
            attach(len(atoms) - 1)
            i += 1
        else:
            sym = None
            for two in _TWO_LETTER:
                if text.startswith(two, i):
                    sym = two
                    break
            if sym is None and ch.upper() in "BCNOPSFI":
                sym = ch
            if sym is None:
                raise TemplateError(f"unexpected {ch!r} in pattern {text!r}")
            aromatic = sym.islower()
            element = sym.capitalize()
            if aromatic and element not in AROMATIC_ELEMENTS:
                raise TemplateError(f"{element} cannot be aromatic in {text!r}")
            atoms.append(AtomPattern(element=element, aromatic=aromatic))
            attach(len(atoms) - 1)
            i += len(sym)
    if branch_stack:
        raise TemplateError(f"unbalanced '(' in {text!r}")
    if open_rings:
        raise TemplateError(f"unclosed ring closure in {text!r}")
    if pending_explicit:
        raise TemplateError(f"dangling bond in {text!r}")
    if not atoms:
        raise TemplateError("empty pattern side")
    return PatternGraph(atoms, bonds)


# -- edit derivation ----------------------------------------------------------


@dataclass(frozen=True)
class EditSet:
    """Correspondence and rewrite actions between template sides.

    `paired` maps (side, reactant atom) -> product atom for atoms preserved
    by the rewrite. Forward application deletes `reactant_only` atoms,
    applies bond edits left-to-right and creates `product_only` atoms;
    backward application is the exact mirror.
    """

    paired: tuple  # ((side, r_idx, p_idx), ...)
    reactant_only: tuple  # ((side, r_idx), ...)
    product_only: tuple  # (p_idx, ...)
    # bonds between paired atoms: (p_a, p_b, reactant order|None, product order|None)
    bond_edits: tuple


def _signature(pattern: PatternGraph, idx: int, bond: PatternBond):
    ap = pattern.atoms[idx]
    return (ap.element, ap.aromatic, bond.concrete_order.value,
            ap.charge, ap.h_count)


def _derive_edits(reactants: Sequence[PatternGraph],
                  product: PatternGraph) -> EditSet:
    r_maps: dict[int, tuple[int, int]] = {}
    for side, pat in enumerate(reactants):
        for idx, ap in enumerate(pat.atoms):
            if ap.map_index is not None:
                if ap.map_index in r_maps:
                    raise TemplateError(f"duplicate map index {ap.map_index} on reactant side")
                r_maps[ap.map_index] = (side, idx)
    p_maps: dict[int, int] = {}
    for idx, ap in enumerate(product.atoms):
        if ap.map_index is not None:
            if ap.map_index in p_maps:
                raise TemplateError(f"duplicate map index {ap.map_index} on product side")
            p_maps[ap.map_index] = idx

    r_to_p: dict[tuple[int, int], int] = {}
    for map_index, p_idx in p_maps.items():
        if map_index not in r_maps:
            raise TemplateError(f"unmapped product atom (map index {map_index})")
        r_to_p[r_maps[map_index]] = p_idx
    p_to_r = {p: r for r, p in r_to_p.items()}

    # auto-pair unmapped atoms with a unique matching signature around an
    # already-paired anchor, so spectator atoms written on both sides
    # (e.g. a carbonyl oxygen) are preserved rather than deleted and re-made
    changed = True
    while changed:
        changed = False
        for (side, ri), pi in list(r_to_p.items()):
            r_pat = reactants[side]
            r_cands: dict = {}
            for rj, bi in r_pat.adjacency[ri]:
                if (side, rj) in r_to_p or r_pat.atoms[rj].map_index is not None:
                    continue
                r_cands.setdefault(_signature(r_pat, rj, r_pat.bonds[bi]), []).append(rj)
            p_cands: dict = {}
            for pj, bi in product.adjacency[pi]:
                if pj in p_to_r or product.atoms[pj].map_index is not None:
                    continue
                p_cands.setdefault(_signature(product, pj, product.bonds[bi]), []).append(pj)
            for sig, r_list in r_cands.items():
                p_list = p_cands.get(sig, [])
                if len(r_list) == 1 and len(p_list) == 1:
                    r_to_p[(side, r_list[0])] = p_list[0]
                    p_to_r[p_list[0]] = (side, r_list[0])
                    changed = True

    reactant_only = tuple(sorted(
        (side, idx) for side, pat in enumerate(reactants)
        for idx in range(len(pat)) if (side, idx) not in r_to_p))
    product_only = tuple(sorted(
        idx for idx in range(len(product)) if idx not in p_to_r))

    r_bonds: dict[tuple[int, int], BondOrder] = {}
    for side, pat in enumerate(reactants):
        for bond in pat.bonds:
            ka, kb = (side, bond.a), (side, bond.b)
            if ka in r_to_p and kb in r_to_p:
                key = tuple(sorted((r_to_p[ka], r_to_p[kb])))
                r_bonds[key] = bond.concrete_order
    p_bonds: dict[tuple[int, int], BondOrder] = {}
    for bond in product.bonds:
        if bond.a in p_to_r and bond.b in p_to_r:
            p_bonds[tuple(sorted((bond.a, bond.b)))] = bond.concrete_order
    bond_edits = []
    for key in sorted(set(r_bonds) | set(p_bonds)):
        ro = r_bonds.get(key)
        po = p_bonds.get(key)
        if ro is not po:
            bond_edits.append((key[0], key[1], ro, po))

    paired = tuple(sorted((side, ri, pi) for (side, ri), pi in r_to_p.items()))
    return EditSet(paired=paired, reactant_only=reactant_only,
                   product_only=product_only, bond_edits=tuple(bond_edits))


@dataclass(frozen=True)
class ReactionTemplate:
    """Uni- or bi-molecular rewrite rule with a derived edit set."""

    id: str
    reactant_patterns: tuple
    product_pattern: PatternGraph
    edits: EditSet = field(compare=False)

    @property
    def arity(self) -> int:
        return len(self.reactant_patterns)

    @property
    def is_bimolecular(self) -> bool:
        return self.arity == 2

    def __repr__(self):
        return f"ReactionTemplate({self.id!r}, arity={self.arity})"


def parse_template(text: str, template_id: str = "") -> ReactionTemplate:
    """Parse `R1>>P` or `R1.R2>>P` into a ReactionTemplate.

    Rejects wildcards on the reactant side (they are expanded away during
    data preparation), wildcard product atoms, unmapped product atoms and
    duplicate map indices.
    """
    if text.count(">>") != 1:
        raise TemplateError(f"template must contain exactly one '>>': {text!r}")
    lhs, rhs = text.split(">>")
    sides = [s.strip() for s in lhs.split(".")]
    if not (1 <= len(sides) <= 2):
        raise TemplateError(f"templates take 1 or 2 reactants, got {len(sides)}")
    reactants = tuple(_parse_pattern_side(s) for s in sides)
    product = _parse_pattern_side(rhs.strip())
    for pat in reactants:
        for ap in pat.atoms:
            if ap.is_wildcard():
                raise TemplateError(f"wildcard in reactant side: {text!r}")
    edits = _derive_edits(reactants, product)
    for p_idx in edits.product_only:
        if product.atoms[p_idx].is_wildcard():
            raise TemplateError(f"wildcard product atom cannot be created: {text!r}")
    for side, r_idx in edits.reactant_only:
        if reactants[side].atoms[r_idx].element is None:
            raise TemplateError(
                f"leaving-group atom without element cannot be restored: {text!r}")
    return ReactionTemplate(id=template_id or text, reactant_patterns=reactants,
                            product_pattern=product, edits=edits)


def read_templates(path) -> list[ReactionTemplate]:
    """Read `id<TAB>template-expression` lines; '#' comments ignored."""
    templates = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TemplateError(f"{path}:{lineno}: expected 'id<TAB>expression'")
            try:
                templates.append(parse_template(parts[1].strip(), parts[0].strip()))
            except TemplateError as exc:
                raise TemplateError(f"{path}:{lineno}: {exc}") from exc
    return templates


# -- matching -----------------------------------------------------------------


def match_pattern(pattern: PatternGraph, mol: MolGraph) -> list[Embedding]:
    """All subgraph embeddings of `pattern` into `mol`.

    Backtracking search; automorphic duplicates are retained and results are
    ordered lexicographically by mapped molecule indices.
    """
    np_atoms = len(pattern.atoms)
    if np_atoms == 0 or np_atoms > len(mol.atoms):
        return []
    # visit order: start at 0, always extend along pattern bonds (sides are
    # connected, so a simple BFS order suffices)
    order = [0]
    seen = {0}
    queue = [0]
    while queue:
        cur = queue.pop(0)
        for nbr, _ in pattern.adjacency[cur]:
            if nbr not in seen:
                seen.add(nbr)
                order.append(nbr)
                queue.append(nbr)
    if len(order) != np_atoms:
        raise TemplateError("pattern side is disconnected")

    results: list[Embedding] = []
    assignment: dict[int, int] = {}
    used = [False] * len(mol.atoms)

    def extend(depth: int):
        if depth == np_atoms:
            results.append(tuple(assignment[i] for i in range(np_atoms)))
            return
        p_idx = order[depth]
        anchors = [(pj, pattern.bonds[bi]) for pj, bi in pattern.adjacency[p_idx]
                   if pj in assignment]
        for m_idx in range(len(mol.atoms)):
            if used[m_idx] or not pattern.atoms[p_idx].matches(mol, m_idx):
                continue
            ok = True
            for pj, pbond in anchors:
                mbond = mol.bond_between(m_idx, assignment[pj])
                if mbond is None or not pbond.matches(mbond.order):
                    ok = False
                    break
            if ok:
                assignment[p_idx] = m_idx
                used[m_idx] = True
                extend(depth + 1)
                used[m_idx] = False
                del assignment[p_idx]

    extend(0)
    results.sort()
    return results


# -- application --------------------------------------------------------------


def _instantiate_atom(ap: AtomPattern) -> Atom:
    if ap.element is None:
        raise TemplateError("cannot instantiate wildcard atom")
    return Atom(element=ap.element, aromatic=bool(ap.aromatic),
                formal_charge=ap.charge or 0, explicit_h=ap.h_count)


class _GraphBuilder:
    """Mutable atom/bond workspace for template application."""

    def __init__(self, atoms: Sequence[Atom], bonds: Sequence[Bond]):
        self.atoms: list[Optional[Atom]] = list(atoms)
        self.bonds: dict[tuple[int, int], BondOrder] = {
            (b.a, b.b): b.order for b in bonds}

    def add_atom(self, atom: Atom) -> int:
        self.atoms.append(atom)
        return len(self.atoms) - 1

    def delete_atom(self, idx: int):
        self.atoms[idx] = None
        for key in [k for k in self.bonds if idx in k]:
            del self.bonds[key]

    def set_bond(self, a: int, b: int, order: BondOrder):
        self.bonds[(min(a, b), max(a, b))] = order

    def remove_bond(self, a: int, b: int):
        self.bonds.pop((min(a, b), max(a, b)), None)

    def rewrite(self, idx: int, charge: Optional[int], h_count: Optional[int],
                aromatic: Optional[bool]):
        atom = self.atoms[idx]
        self.atoms[idx] = Atom(
            element=atom.element,
            aromatic=atom.aromatic if aromatic is None else aromatic,
            formal_charge=0 if charge is None else charge,
            explicit_h=h_count)

    def build(self) -> MolGraph:
        remap = {}
        atoms = []
        for idx, atom in enumerate(self.atoms):
            if atom is not None:
                remap[idx] = len(atoms)
                atoms.append(atom)
        bonds = [Bond(remap[a], remap[b], order)
                 for (a, b), order in sorted(self.bonds.items(), key=lambda kv: kv[0])
                 if a in remap and b in remap]
        return MolGraph(atoms, bonds)


def apply_forward(template: ReactionTemplate,
                  reactants: Sequence[MolGraph]) -> list[MolGraph]:
    """Products of applying the template to positionally-aligned reactants.

    One product per embedding combination; candidates that violate valence
    or fall apart into several fragments are discarded. Results are
    deduplicated by canonical form and sorted canonically.

    Raises TemplateNotApplicable when any reactant has no embedding.
    """
    if len(reactants) != template.arity:
        raise TemplateError(
            f"template {template.id} needs {template.arity} reactants, "
            f"got {len(reactants)}")
    side_embeddings = []
    for pat, mol in zip(template.reactant_patterns, reactants):
        embs = match_pattern(pat, mol)
        if not embs:
            raise TemplateNotApplicable(
                f"template not applicable: {template.id} has no match")
        side_embeddings.append(embs)

    offsets = [0]
    for mol in reactants[:-1]:
        offsets.append(offsets[-1] + len(mol.atoms))
    combined_atoms = [a for mol in reactants for a in mol.atoms]
    combined_bonds = []
    for side, mol in enumerate(reactants):
        for bond in mol.bonds:
            combined_bonds.append(Bond(bond.a + offsets[side],
                                       bond.b + offsets[side], bond.order))

    combos = [[e] for e in side_embeddings[0]]
    if template.arity == 2:
        combos = [[e0, e1] for e0 in side_embeddings[0] for e1 in side_embeddings[1]]

    seen: dict[str, MolGraph] = {}
    for combo in combos:
        locate = {(side, ri): combo[side][ri] + offsets[side]
                  for side, emb in enumerate(combo) for ri in range(len(emb))}
        builder = _GraphBuilder(combined_atoms, combined_bonds)
        for side, ri, pi in template.edits.paired:
            ap = template.product_pattern.atoms[pi]
            builder.rewrite(locate[(side, ri)], ap.charge, ap.h_count, ap.aromatic)
        for side, ri in template.edits.reactant_only:
            builder.delete_atom(locate[(side, ri)])
        pair_pos = {pi: locate[(side, ri)] for side, ri, pi in template.edits.paired}
        for pa, pb, r_order, p_order in template.edits.bond_edits:
            if p_order is None:
                builder.remove_bond(pair_pos[pa], pair_pos[pb])
            else:
                builder.set_bond(pair_pos[pa], pair_pos[pb], p_order)
        for pi in template.edits.product_only:
            pair_pos[pi] = builder.add_atom(
                _instantiate_atom(template.product_pattern.atoms[pi]))
        for bond in template.product_pattern.bonds:
            if bond.a in template.edits.product_only or bond.b in template.edits.product_only:
                builder.set_bond(pair_pos[bond.a], pair_pos[bond.b],
                                 bond.concrete_order)
        try:
            product = builder.build()
        except ChemError:
            continue  # valence violation: discard this embedding combination
        if not product.atoms or not product.is_single_fragment():
            continue
        seen.setdefault(write_canonical_smiles(product), product)
    return [seen[key] for key in sorted(seen)]


def apply_backward(template: ReactionTemplate,
                   product: MolGraph) -> list[list[MolGraph]]:
    """Reactant sets obtained by reversing the template on `product`.

    One candidate per embedding of the product pattern; candidates whose
    reversal does not split into exactly `arity` fragments are discarded.
    Returns deduplicated reactant lists aligned with the template's
    reactant pattern order, sorted canonically; empty when nothing matches.
    """
    embeddings = match_pattern(template.product_pattern, product)
    results: dict[tuple, list[MolGraph]] = {}
    for emb in embeddings:
        builder = _GraphBuilder(product.atoms, product.bonds)
        pair_mol = {}  # (side, r_idx) -> molecule index
        for side, ri, pi in template.edits.paired:
            ap = template.reactant_patterns[side].atoms[ri]
            builder.rewrite(emb[pi], ap.charge, ap.h_count, ap.aromatic)
            pair_mol[(side, ri)] = emb[pi]
        for pi in template.edits.product_only:
            builder.delete_atom(emb[pi])
        pair_pos = {pi: emb[pi] for _, _, pi in template.edits.paired}
        for pa, pb, r_order, p_order in template.edits.bond_edits:
            if r_order is None:
                builder.remove_bond(pair_pos[pa], pair_pos[pb])
            else:
                builder.set_bond(pair_pos[pa], pair_pos[pb], r_order)
        restored = set(template.edits.reactant_only)
        for side, ri in template.edits.reactant_only:
            pair_mol[(side, ri)] = builder.add_atom(
                _instantiate_atom(template.reactant_patterns[side].atoms[ri]))
        for side, pat in enumerate(template.reactant_patterns):
            for bond in pat.bonds:
                ka, kb = (side, bond.a), (side, bond.b)
                if ka in restored or kb in restored:
                    builder.set_bond(pair_mol[ka], pair_mol[kb], bond.concrete_order)
        try:
            graph = builder.build()
        except ChemError:
            continue
        comps = graph.connected_components()
        if len(comps) != template.arity:
            continue
        # remap pattern-side anchor atoms to post-compaction indices
        remap = {}
        pos = 0
        for idx, atom in enumerate(builder.atoms):
            if atom is not None:
                remap[idx] = pos
                pos += 1
        comp_of = {}
        for ci, comp in enumerate(comps):
            for a in comp:
                comp_of[a] = ci
        side_comp = {}
        consistent = True
        for (side, ri), raw_idx in pair_mol.items():
            if raw_idx not in remap:
                continue
            ci = comp_of[remap[raw_idx]]
            if side_comp.setdefault(side, ci) != ci:
                consistent = False
                break
        if not consistent or len(side_comp) != template.arity:
            continue
        if len(set(side_comp.values())) != template.arity:
            continue
        fragments = graph.fragments()
        ordered = [fragments[side_comp[side]] for side in range(template.arity)]
        try:
            key = tuple(write_canonical_smiles(f) for f in ordered)
        except ChemError:
            continue
        results.setdefault(key, ordered)
    return [results[key] for key in sorted(results)]


def check_reversible(template: ReactionTemplate,
                     reactants: Sequence[MolGraph]) -> bool:
    """True iff some forward product backward-decomposes into `reactants`."""
    products = apply_forward(template, reactants)
    target = sorted(write_canonical_smiles(m) for m in reactants)
    for product in products:
        for rset in apply_backward(template, product):
            if sorted(write_canonical_smiles(m) for m in rset) == target:
                return True
    return False
