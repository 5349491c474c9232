"""Crystal structures from CIF text, periodic neighbor graphs, and the CGCNN
structure encoder."""

from __future__ import annotations

import hashlib
import math
import re
import shlex
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import MalformedCif, ShapeMismatch

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
ATOMIC_NUMBER = {sym: z for z, sym in enumerate(ELEMENTS, start=1)}


@dataclass
class CrystalStructure:
    lattice: np.ndarray  # rows are the a, b, c vectors in Å
    frac_coords: np.ndarray  # (N, 3), wrapped into [0, 1)
    atomic_numbers: np.ndarray  # (N,)

    def __post_init__(self):
        self.lattice = np.asarray(self.lattice, dtype=np.float64).reshape(3, 3)
        self.frac_coords = np.asarray(self.frac_coords, dtype=np.float64).reshape(-1, 3)
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=np.int64).reshape(-1)
        if abs(np.linalg.det(self.lattice)) <= 1e-6:
            raise MalformedCif("lattice is singular")
        if len(self.atomic_numbers) < 1 or len(self.atomic_numbers) != len(self.frac_coords):
            raise MalformedCif("structure needs matching, non-empty coords and species")
        if self.atomic_numbers.min() < 1 or self.atomic_numbers.max() > len(ELEMENTS):
            raise MalformedCif("atomic numbers must lie in [1, 118]")

    def __len__(self) -> int:
        return len(self.atomic_numbers)


# --- CIF ---------------------------------------------------------------------

_NUMBER_RE = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?")


def _cif_float(value: str, key: str) -> float:
    m = _NUMBER_RE.match(value)
    if not m:
        raise MalformedCif(f"{key}: cannot read number from {value!r}")
    return float(m.group(0))


def _cif_tokens(text: str) -> list[str]:
    tokens: list[str] = []
    lines = text.splitlines()
    k = 0
    while k < len(lines):
        line = lines[k]
        if line.startswith(";"):
            block = [line[1:]]
            k += 1
            while k < len(lines) and not lines[k].startswith(";"):
                block.append(lines[k])
                k += 1
            tokens.append("\n".join(block).strip())
            k += 1
            continue
        stripped = line.split("#", 1)[0] if "'" not in line and '"' not in line else line
        try:
            tokens.extend(shlex.split(stripped, comments=False, posix=True))
        except ValueError as e:
            raise MalformedCif(f"line {k + 1}: {e}") from None
        k += 1
    return tokens


def _element_symbol(raw: str) -> str:
    m = re.match(r"[A-Za-z]{1,2}", raw)
    if not m:
        raise MalformedCif(f"cannot read an element from {raw!r}")
    sym = m.group(0)
    sym = sym[0].upper() + sym[1:].lower()
    if sym in ATOMIC_NUMBER:
        return sym
    if sym[0] in ATOMIC_NUMBER:
        return sym[0]
    raise MalformedCif(f"unknown element symbol {raw!r}")


def _cos_sin(deg: float) -> tuple[float, float]:
    if deg == 90.0:
        return 0.0, 1.0
    r = math.radians(deg)
    return math.cos(r), math.sin(r)


def lattice_from_parameters(a, b, c, alpha, beta, gamma) -> np.ndarray:
    """a along x, b in the xy-plane."""
    ca, _ = _cos_sin(alpha)
    cb, _ = _cos_sin(beta)
    cg, sg = _cos_sin(gamma)
    cx = c * cb
    cy = c * (ca - cb * cg) / sg
    cz2 = c * c - cx * cx - cy * cy
    if cz2 <= 0:
        raise MalformedCif("cell angles do not describe a valid lattice")
    return np.array([[a, 0.0, 0.0], [b * cg, b * sg, 0.0], [cx, cy, math.sqrt(cz2)]])


def parse_cif(text: str) -> CrystalStructure:
    """Read cell parameters and the atom_site loop of a P1 CIF."""
    tokens = _cif_tokens(text)
    scalars: dict[str, str] = {}
    loops: list[tuple[list[str], list[str]]] = []
    k = 0
    while k < len(tokens):
        tok = tokens[k]
        low = tok.lower()
        if low == "loop_":
            k += 1
            headers = []
            while k < len(tokens) and tokens[k].startswith("_"):
                headers.append(tokens[k].lower())
                k += 1
            values = []
            while k < len(tokens) and not tokens[k].startswith("_") and tokens[k].lower() != "loop_" and not tokens[k].lower().startswith("data_"):
                values.append(tokens[k])
                k += 1
            loops.append((headers, values))
        elif tok.startswith("_") and k + 1 < len(tokens):
            scalars[low] = tokens[k + 1]
            k += 2
        else:
            k += 1

    keys = ("a", "b", "c", "alpha", "beta", "gamma")
    cell = []
    for key in keys:
        name = f"_cell_length_{key}" if len(key) == 1 else f"_cell_angle_{key}"
        if name not in scalars:
            raise MalformedCif(f"missing {name}")
        cell.append(_cif_float(scalars[name], name))

    site = next((lp for lp in loops if any(h.startswith("_atom_site_fract") for h in lp[0])), None)
    if site is None:
        raise MalformedCif("missing atom_site loop with fractional coordinates")
    headers, values = site
    width = len(headers)
    if width == 0 or len(values) % width:
        raise MalformedCif("atom_site loop has a ragged value table")
    col = {h: i for i, h in enumerate(headers)}
    for h in ("_atom_site_fract_x", "_atom_site_fract_y", "_atom_site_fract_z"):
        if h not in col:
            raise MalformedCif(f"atom_site loop lacks {h}")
    species_col = col.get("_atom_site_type_symbol", col.get("_atom_site_label"))
    if species_col is None:
        raise MalformedCif("atom_site loop has neither type_symbol nor label")
    rows = [values[i : i + width] for i in range(0, len(values), width)]
    numbers, coords = [], []
    for row in rows:
        numbers.append(ATOMIC_NUMBER[_element_symbol(row[species_col])])
        coords.append(
            [_cif_float(row[col[f"_atom_site_fract_{ax}"]], "_atom_site_fract") for ax in "xyz"]
        )
    frac = np.asarray(coords, dtype=np.float64)
    frac = frac - np.floor(frac)
    frac[frac >= 1.0] = 0.0
    return CrystalStructure(lattice_from_parameters(*cell), frac, np.asarray(numbers))


def read_cif(path: str | Path) -> CrystalStructure:
    try:
        text = Path(path).read_text(encoding="utf-8", errors="replace")
    except OSError as e:
        raise MalformedCif(f"cannot read {path}: {e}") from None
    return parse_cif(text)


# --- neighbor graph ------------------------------------------------------------


@dataclass(frozen=True)
class GraphConfig:
    r_cut: float = 8.0
    m_max: int = 12
    gauss_step: float = 0.2
    gauss_width: float = 0.2

    @property
    def centers(self) -> np.ndarray:
        n = int(round(self.r_cut / self.gauss_step))
        return np.arange(n + 1, dtype=np.float64) * self.gauss_step


def neighbor_list(s: CrystalStructure, r_cut: float, m_max: int):
    """Periodic neighbors of every atom within ``r_cut``, nearest ``m_max`` kept.

    Returns ``(edges, distances)``: ``edges`` is an ``(E, 5)`` int array of
    ``(i, j, n_a, n_b, n_c)`` rows, sorted by ``i`` then distance, ties by
    ``(j, image)``.
    """
    if r_cut <= 0:
        raise ValueError("r_cut must be positive")
    lat = s.lattice
    # interplanar spacings bound how many images each axis needs
    spacing = 1.0 / np.linalg.norm(np.linalg.inv(lat), axis=0)
    reach = np.ceil(r_cut / spacing).astype(int) + 1
    ranges = [np.arange(-r, r + 1) for r in reach]
    images = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3)
    frac = s.frac_coords
    n = len(frac)
    rows_e, rows_d = [], []
    for i in range(n):
        delta = frac[None, :, :] - frac[i] + images[:, None, :]  # (I, N, 3)
        dist = np.linalg.norm(delta @ lat, axis=-1)
        img_idx, j_idx = np.nonzero(dist <= r_cut)
        d = dist[img_idx, j_idx]
        img = images[img_idx]
        keep = ~((j_idx == i) & ~img.any(axis=1))
        j_idx, img, d = j_idx[keep], img[keep], d[keep]
        keep = d > 0
        j_idx, img, d = j_idx[keep], img[keep], d[keep]
        order = np.lexsort((img[:, 2], img[:, 1], img[:, 0], j_idx, d))[:m_max]
        e = np.empty((len(order), 5), dtype=np.int64)
        e[:, 0] = i
        e[:, 1] = j_idx[order]
        e[:, 2:] = img[order]
        rows_e.append(e)
        rows_d.append(d[order])
    return np.concatenate(rows_e), np.concatenate(rows_d)


def gaussian_expand(d, centers: np.ndarray, width: float) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    return np.exp(-((d[..., None] - centers) ** 2) / width**2)


@dataclass
class CrystalGraph:
    atomic_numbers: np.ndarray  # (N,)
    edges: np.ndarray  # (E, 5)
    distances: np.ndarray  # (E,)
    edge_features: np.ndarray  # (E, G)

    @property
    def n_nodes(self) -> int:
        return len(self.atomic_numbers)

    def dense(self, m_max: int):
        """``(nbr_index, nbr_mask, nbr_features)`` padded to ``m_max`` per node."""
        n, g = self.n_nodes, self.edge_features.shape[1]
        index = np.zeros((n, m_max), dtype=np.int64)
        mask = np.zeros((n, m_max), dtype=bool)
        feats = np.zeros((n, m_max, g))
        counts = np.zeros(n, dtype=np.int64)
        for e, (i, j) in enumerate(self.edges[:, :2]):
            k = counts[i]
            index[i, k], mask[i, k], feats[i, k] = j, True, self.edge_features[e]
            counts[i] += 1
        return index, mask, feats


def build_graph(s: CrystalStructure, cfg: GraphConfig = GraphConfig()) -> CrystalGraph:
    edges, dist = neighbor_list(s, cfg.r_cut, cfg.m_max)
    return CrystalGraph(
        s.atomic_numbers.copy(), edges, dist, gaussian_expand(dist, cfg.centers, cfg.gauss_width)
    )


class GraphCache:
    """Per-structure ``.npz`` files keyed by a hash of the CIF text and graph settings."""

    def __init__(self, root: str | Path, cfg: GraphConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.root.mkdir(parents=True, exist_ok=True)

    def key(self, cif_text: str) -> str:
        h = hashlib.sha256(cif_text.encode("utf-8"))
        h.update(repr(sorted(asdict(self.cfg).items())).encode())
        return h.hexdigest()

    def load_or_build(self, cif_path: str | Path) -> CrystalGraph:
        text = Path(cif_path).read_text(encoding="utf-8", errors="replace")
        path = self.root / f"{self.key(text)}.npz"
        if path.exists():
            with np.load(path) as z:
                return CrystalGraph(z["atomic_numbers"], z["edges"], z["distances"], z["edge_features"])
        graph = build_graph(parse_cif(text), self.cfg)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, **asdict(graph))
        tmp.replace(path)
        return graph


def load_graph(cif_path: str | Path, cfg: GraphConfig, cache: GraphCache | None = None) -> CrystalGraph:
    if cache is not None:
        return cache.load_or_build(cif_path)
    return build_graph(read_cif(cif_path), cfg)


# --- CGCNN encoder -----------------------------------------------------------


@dataclass(frozen=True)
class CgcnnConfig:
    atom_fea_len: int = 64
    n_conv: int = 3
    embed_size: int = 512
    n_gauss: int = 41

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CgcnnState:
    config: CgcnnConfig
    params: dict[str, Tensor]


def init_cgcnn(config: CgcnnConfig, rng: np.random.Generator) -> CgcnnState:
    f, g = config.atom_fea_len, config.n_gauss
    z_dim = 2 * f + g
    bound = 1.0 / math.sqrt(z_dim)
    arrays = {"element_embedding": rng.normal(0.0, 1.0 / math.sqrt(f), size=(len(ELEMENTS), f))}
    for layer in range(config.n_conv):
        p = f"conv.{layer}"
        arrays[f"{p}.w_gate"] = rng.uniform(-bound, bound, (z_dim, f))
        arrays[f"{p}.b_gate"] = np.zeros(f)
        arrays[f"{p}.w_core"] = rng.uniform(-bound, bound, (z_dim, f))
        arrays[f"{p}.b_core"] = np.zeros(f)
    arrays["proj.w"] = rng.uniform(-1 / math.sqrt(f), 1 / math.sqrt(f), (f, config.embed_size))
    arrays["proj.b"] = np.zeros(config.embed_size)
    return CgcnnState(config, {k: ad.parameter(v, name=k) for k, v in arrays.items()})


def conv_layer(node_feats, nbr_index, nbr_mask, nbr_feats, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Residual gated update ``v_i + Σ_j σ(z W_f + b_f) ⊙ softplus(z W_s + b_s)``
    with ``z = [v_i, v_j, u_ij]``.

    Neighbor messages are summed in sorted order, so the result does not depend
    on how atoms are numbered.
    """
    v = ad._as_tensor(node_feats)
    n, m = nbr_index.shape
    f = v.shape[1]
    w_gate = params[f"{prefix}.w_gate"]
    if w_gate.shape[0] != 2 * f + nbr_feats.shape[-1]:
        raise ShapeMismatch(f"{prefix}: weight rows {w_gate.shape[0]} != 2F+G")
    self_part = ad.reshape(v, (n, 1, f)) * np.ones((1, m, 1))
    nbr_part = ad.getitem(v, nbr_index)
    z = ad.concat([self_part, nbr_part, nbr_feats], axis=2)
    gate = ad.sigmoid(ad.matmul(z, w_gate) + params[f"{prefix}.b_gate"])
    core = ad.softplus(ad.matmul(z, params[f"{prefix}.w_core"]) + params[f"{prefix}.b_core"])
    msg = gate * core * nbr_mask[:, :, None].astype(np.float64)
    return v + ad.sorted_sum(msg, axis=1)


def encode_graphs(state: CgcnnState, graphs: list[CrystalGraph], m_max: int) -> Tensor:
    """Structure embeddings ``(B, embed_size)``: element embedding, conv
    layers, node mean-pool, linear projection."""
    dense = [g.dense(m_max) for g in graphs]
    sizes = [g.n_nodes for g in graphs]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    index = np.concatenate([d[0] + off for d, off in zip(dense, offsets)])
    mask = np.concatenate([d[1] for d in dense])
    feats = np.concatenate([d[2] for d in dense])
    z = np.concatenate([g.atomic_numbers for g in graphs])
    v = ad.getitem(state.params["element_embedding"], z - 1)
    for layer in range(state.config.n_conv):
        v = conv_layer(v, index, mask, feats, state.params, f"conv.{layer}")
    pooled = [
        ad.sorted_sum(v[off : off + n], axis=0) * (1.0 / n) for off, n in zip(offsets, sizes)
    ]
    crystal = ad.stack(pooled, axis=0)
    return ad.matmul(crystal, state.params["proj.w"]) + state.params["proj.b"]


def encode_structure(s: CrystalStructure, state: CgcnnState, cfg: GraphConfig = GraphConfig()) -> Tensor:
    return encode_graphs(state, [build_graph(s, cfg)], cfg.m_max)[0]
