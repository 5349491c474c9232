"""The ten acceptance criteria, each at its stated tolerance and time budget.

Every test prints (and records for the terminal summary) one line of the form
``criterion N PASS|FAIL  <title>  (<seconds>s)``.
"""

import functools
import itertools
import json
import math
import random
import time

import numpy as np
import yaml

import conftest
from fd import numeric_grad, rel_error
from moformer import autodiff as ad
from moformer.autodiff import Tape
from moformer.checkpoint import Checkpoint
from moformer.cli import main
from moformer.crystal import (
    CgcnnConfig,
    CrystalStructure,
    GraphConfig,
    build_graph,
    encode_graphs,
    init_cgcnn,
    lattice_from_parameters,
    neighbor_list,
    parse_cif,
)
from moformer.mofid import (
    MAX_LEN,
    PAD_ID,
    build_vocabulary,
    decode_tokens,
    encode,
    parse_mofid,
    tokenize_mofid,
    tokenize_smiles,
)
from moformer.pretrain import (
    LAMBDA,
    PretrainModel,
    PretrainSettings,
    barlow_twins_loss,
    cross_correlation,
    pretrain_step,
)
from moformer.regression import LabeledRecord, TrainPlan, finetune, split_dataset
from moformer.transformer import TransformerConfig, forward, init_encoder, positional_encoding
from smiles_gen import brute_force_segment, random_smiles
from toydata import tiny_encoders, toy_cif, toy_mofid, toy_pairs, write_dataset


def criterion(number: int, title: str, budget: float | None = None):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            ok = False
            try:
                fn(*args, **kwargs)
                elapsed = time.perf_counter() - start
                assert budget is None or elapsed < budget, f"took {elapsed:.1f}s, budget {budget}s"
                ok = True
            finally:
                elapsed = time.perf_counter() - start
                line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}  ({elapsed:.2f}s)"
                conftest.ACCEPTANCE[number] = line
                print(line)
        return run
    return wrap


# 1 -------------------------------------------------------------------------------

@criterion(1, "tokenizer: lossless, fixed length 512, round trip, examples", budget=10)
def test_c01_tokenizer():
    assert tokenize_smiles("CCO") == ["C", "C", "O"]
    assert tokenize_smiles("[Zn]") == ["[Zn]"]
    assert tokenize_smiles("C1=CC=CC=C1Br") == ["C", "1", "=", "C", "C", "=", "C", "C", "=", "C", "1", "Br"]
    gen = random.Random(1)
    mofids = []
    for k in range(1000):
        s = random_smiles(gen)
        tokens = tokenize_smiles(s)
        assert "".join(tokens) == s
        assert tokens == brute_force_segment(s)
        mofids.append(parse_mofid(f"[Zn].{s} MOFid-v1.pcu.cat{k % 3}"))
    vocab = build_vocabulary(mofids)
    for m in mofids:
        seq = encode(m, vocab)
        assert len(seq.ids) == MAX_LEN == 512
        assert decode_tokens(seq, vocab) == tokenize_mofid(m)
        assert parse_mofid(str(m)) == m


# 2 -------------------------------------------------------------------------------

def _check(fn, inputs, tol):
    params = {f"x{k}": ad.parameter(a) for k, a in enumerate(inputs)}
    with Tape():
        loss = fn(*params.values())
    grads = ad.backward(loss, params)
    numeric = numeric_grad(lambda: float(fn(*params.values()).data), [p.data for p in params.values()])
    worst = max(rel_error(grads[k], n) for k, n in zip(params, numeric))
    assert worst < tol, worst
    return worst


def _primitive_cases(rng):
    w = lambda *shape: rng.normal(size=shape)
    pos = lambda *shape: rng.uniform(0.5, 2.0, shape)
    away = lambda *shape: rng.choice([-1, 1], shape) * rng.uniform(0.3, 1.5, shape)
    mask = np.array([[False, False, True], [False, True, False]])
    # fixed projection weights turn every output into a scalar loss
    W, W3, W33, W25, W223, W432 = w(2, 3), w(2, 4, 5), w(3, 3), w(2, 5), w(2, 2, 3), w(4, 3, 2)
    return {
        "add": (lambda a, b: ((a + b) * W).sum(), [w(2, 3), w(3)]),
        "sub": (lambda a, b: ((a - b) * W).sum(), [w(2, 3), w(2, 1)]),
        "mul": (lambda a, b: ((a * b) * W).sum(), [w(2, 3), w(1, 3)]),
        "div": (lambda a, b: ((a / b) * W).sum(), [w(2, 3), pos(2, 3)]),
        "neg": (lambda a: (-a * W).sum(), [w(2, 3)]),
        "power": (lambda a: (ad.power(a, 2.5) * W).sum(), [pos(2, 3)]),
        "exp": (lambda a: (ad.exp(a) * W).sum(), [w(2, 3)]),
        "log": (lambda a: (ad.log(a) * W).sum(), [pos(2, 3)]),
        "sqrt": (lambda a: (ad.sqrt(a) * W).sum(), [pos(2, 3)]),
        "absolute": (lambda a: (ad.absolute(a) * W).sum(), [away(2, 3)]),
        "relu": (lambda a: (ad.relu(a) * W).sum(), [away(2, 3)]),
        "sigmoid": (lambda a: (ad.sigmoid(a) * W).sum(), [w(2, 3)]),
        "softplus": (lambda a: (ad.softplus(a) * W).sum(), [w(2, 3)]),
        "matmul": (lambda a, b: (ad.matmul(a, b) * W3).sum(), [w(2, 4, 3), w(3, 5)]),
        "tsum": (lambda a: (ad.tsum(a, axis=1) * W[:, 0]).sum(), [w(2, 3)]),
        "mean": (lambda a: (ad.mean(a, axis=0, keepdims=True) * W[:1]).sum(), [w(2, 3)]),
        "sorted_sum": (lambda a: (ad.sorted_sum(a, axis=1) * W[:, 0]).sum(), [w(2, 3)]),
        "reshape": (lambda a: (ad.reshape(a, (3, 2)) * W.T).sum(), [w(2, 3)]),
        "transpose": (lambda a: (ad.transpose(a) * W.T).sum(), [w(2, 3)]),
        "swapaxes": (lambda a: (ad.swapaxes(a, 0, 2) * W432).sum(), [w(2, 3, 4)]),
        "getitem": (lambda a: (ad.getitem(a, np.array([2, 0, 2])) * W33).sum(), [w(4, 3)]),
        "concat": (lambda a, b: (ad.concat([a, b], axis=1) * W25).sum(), [w(2, 3), w(2, 2)]),
        "stack": (lambda a, b: (ad.stack([a, b], axis=0) * W223).sum(), [w(2, 3), w(2, 3)]),
        "softmax": (lambda a: (ad.softmax(a, mask) * W).sum(), [w(2, 3)]),
        "layer_norm": (lambda a, g, b: (ad.layer_norm(a, g, b) * W).sum(), [w(2, 3), w(3), w(3)]),
    }


@criterion(2, "gradient oracle: primitives 1e-5, toy MOFormer and CGCNN 1e-4", budget=120)
def test_c02_gradients():
    rng = np.random.default_rng(2)
    for name, (fn, inputs) in _primitive_cases(rng).items():
        try:
            _check(fn, inputs, 1e-5)
        except AssertionError as e:
            raise AssertionError(f"{name}: {e}") from None

    # toy MOFormer: vocab 12, d_emb 8, 2 heads, 2 layers, L 6
    state = init_encoder(TransformerConfig(12, 8, 2, 2, 16, 6), np.random.default_rng(3))
    ids = np.array([0, 7, 9, 5, 1, PAD_ID])
    mask = ids == PAD_ID
    wt = rng.normal(size=(6, 8))
    text_loss = lambda: (forward(state, ids, mask).embeddings * wt).sum()
    with Tape():
        loss = text_loss()
    grads = ad.backward(loss, state.params)
    for name, p in state.params.items():
        (num,) = numeric_grad(lambda: float(text_loss().data), [p.data])
        assert rel_error(grads[name], num) < 1e-4, name

    # toy CGCNN: F 4, two atoms
    s = CrystalStructure(lattice_from_parameters(3.2, 3.5, 3.9, 85, 95, 100),
                         [[0.1, 0.2, 0.3], [0.6, 0.55, 0.7]], [30, 8])
    gcfg = GraphConfig(r_cut=4.0, m_max=6, gauss_step=0.5, gauss_width=0.5)
    graph = build_graph(s, gcfg)
    cg = init_cgcnn(CgcnnConfig(atom_fea_len=4, n_conv=2, embed_size=4, n_gauss=len(gcfg.centers)),
                    np.random.default_rng(4))
    wg = rng.normal(size=4)
    graph_loss = lambda: (encode_graphs(cg, [graph], gcfg.m_max)[0] * wg).sum()
    with Tape():
        loss = graph_loss()
    grads = ad.backward(loss, cg.params)
    for name, p in cg.params.items():
        (num,) = numeric_grad(lambda: float(graph_loss().data), [p.data])
        if name == "element_embedding":
            used = s.atomic_numbers - 1
            grads[name], num = grads[name][used], num[used]
        assert rel_error(grads[name], num) < 1e-4, name


# 3 -------------------------------------------------------------------------------

@criterion(3, "attention: rows sum to 1 within 1e-10, exact padding invariance (100 sequences)", budget=30)
def test_c03_attention_invariants():
    rng = np.random.default_rng(5)
    L, vocab = 32, 40
    state = init_encoder(TransformerConfig(vocab, 16, 4, 2, 32, L), np.random.default_rng(6))
    for _ in range(100):
        n = int(rng.integers(2, L))
        ids = np.full(L, PAD_ID)
        ids[:n] = rng.integers(5, vocab, n)
        ids[0] = 0
        mask = ids == PAD_ID
        out = forward(state, ids, mask)
        for w in out.attentions:
            assert np.abs(w.sum(axis=-1) - 1.0).max() <= 1e-10
            assert (w[..., mask] == 0.0).all()
        scrambled = ids.copy()
        scrambled[mask] = rng.integers(0, vocab, mask.sum())
        alt = forward(state, scrambled, mask)
        assert np.array_equal(out.embeddings.data[~mask], alt.embeddings.data[~mask])


# 4 -------------------------------------------------------------------------------

@criterion(4, "positional encoding: PE[0,0]=0, PE[0,1]=1, PE[1,0]=sin(1)")
def test_c04_positional_encoding():
    pe = positional_encoding(512, 512)
    assert pe[0, 0] == 0.0
    assert pe[0, 1] == 1.0
    assert abs(pe[1, 0] - math.sin(1.0)) <= 1e-12


# 5 -------------------------------------------------------------------------------

@criterion(5, "Barlow Twins: identity loss 0, hand example 0.00255, column-scale invariance")
def test_c05_barlow_twins():
    assert barlow_twins_loss(np.eye(512)).item() == 0.0
    assert abs(barlow_twins_loss(np.array([[1.0, 0.5], [0.5, 1.0]]), LAMBDA).item() - 0.00255) <= 1e-12
    rng = np.random.default_rng(7)
    za, zb = rng.normal(size=(16, 8)), rng.normal(size=(16, 8))
    scale = rng.uniform(0.01, 100.0, 8)
    c1 = cross_correlation(za, zb).data
    assert np.abs(c1 - cross_correlation(za * scale, zb).data).max() <= 1e-10
    assert np.abs(c1 - cross_correlation(za, zb * scale).data).max() <= 1e-10


# 6 -------------------------------------------------------------------------------

def _brute_force(s, r_cut):
    found = {}
    for i, j in itertools.product(range(len(s)), repeat=2):
        for img in itertools.product(range(-2, 3), repeat=3):
            if i == j and img == (0, 0, 0):
                continue
            frac = [s.frac_coords[j][k] - s.frac_coords[i][k] + img[k] for k in range(3)]
            cart = [sum(frac[k] * s.lattice[k][c] for k in range(3)) for c in range(3)]
            d = math.sqrt(sum(x * x for x in cart))
            if d <= r_cut:
                found[(i, j) + img] = d
    return found


@criterion(6, "periodic neighbors match 5x5x5 supercell brute force (200 cells)", budget=60)
def test_c06_neighbor_oracle():
    rng = np.random.default_rng(8)
    for _ in range(200):
        n = int(rng.integers(1, 7))
        lat = lattice_from_parameters(*rng.uniform(3.0, 7.0, 3), *rng.uniform(65, 115, 3))
        s = CrystalStructure(lat, rng.random((n, 3)), rng.integers(1, 119, n))
        spacing = 1.0 / np.linalg.norm(np.linalg.inv(lat), axis=0)
        r_cut = float(rng.uniform(0.5, 1.95)) * spacing.min()
        edges, d = neighbor_list(s, r_cut, 10_000)
        ref = _brute_force(s, r_cut)
        got = {tuple(e): x for e, x in zip(edges.tolist(), d.tolist())}
        assert got.keys() == ref.keys()
        assert all(abs(got[k] - ref[k]) <= 1e-9 for k in ref)


# 7 -------------------------------------------------------------------------------

@criterion(7, "overfit: train MAE < 0.05 sigma within 500 epochs (MOFormer and CGCNN)", budget=300)
def test_c07_overfit():
    ids = [7 * k for k in range(16)]
    targets = np.random.default_rng(9).normal(size=16)
    sigma = float(targets.std())
    plan = TrainPlan(lr_encoder=1e-3, lr_head=1e-3, batch_size=16, epochs=500,
                     fractions=(1.0, 0.0, 0.0), track_train_mae=True, seed=0)
    text, graph = tiny_encoders(seed=0, n_ids=120)
    text_records = [LabeledRecord(f"m{k}", text.featurize(toy_mofid(k)), float(t)) for k, t in zip(ids, targets)]
    graph_records = [LabeledRecord(f"m{k}", build_graph(parse_cif(toy_cif(k)), graph.graph_config), float(t))
                     for k, t in zip(ids, targets)]
    for name, encoder, records in (("moformer", text, text_records), ("cgcnn", graph, graph_records)):
        res = finetune(plan, encoder, records)
        best = min(h.train_mae for h in res.history)
        print(f"  {name}: best train MAE / sigma = {best / sigma:.2e}")
        assert best < 0.05 * sigma, name
        assert all(np.isfinite(v.data).all() for v in encoder.params.values())


# 8 -------------------------------------------------------------------------------

@criterion(8, "pretraining: 10-step moving average decreases over 50 steps")
def test_c08_pretrain_trend(tmp_path):
    text, graph = tiny_encoders(seed=3)
    pairs = list(toy_pairs(text, graph, tmp_path, range(8)).values())
    model = PretrainModel(graph, text, PretrainSettings(lr=1e-3, projector_dim=16, seed=3))
    opt = model.make_optimizer()
    losses = [pretrain_step(model, pairs, opt).loss for _ in range(50)]
    moving = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert (np.diff(moving) < 0).all()


# 9 -------------------------------------------------------------------------------

TOY = {
    "seed": 11,
    "transformer": {"d_emb": 16, "n_heads": 2, "n_layers": 2, "d_ff": 32, "max_len": 48},
    "cgcnn": {"atom_fea_len": 8, "n_conv": 2, "r_cut": 4.0, "m_max": 6, "gauss_step": 0.5, "gauss_width": 0.5},
    "pretrain": {"batch_size": 8, "lr": 1e-4, "epochs": 2, "projector_dim": 16},
    "finetune": {"epochs": 3, "batch_size": 16},
}


def _transfer_run(root, config):
    pre_manifest = write_dataset(root / "pre", 40, with_target=False)
    ft_manifest = write_dataset(root / "ft", 40, start=100)
    assert main(["pretrain", "-c", str(config), "--manifest", str(pre_manifest), "--out", str(root / "pre_out")]) == 0
    for branch in ("moformer", "cgcnn"):
        ckpt = root / "pre_out" / f"{branch}_encoder.ckpt"
        assert main(["finetune", "-c", str(config), "--manifest", str(ft_manifest), "--encoder", branch,
                     "--init", str(ckpt), "--out", str(root / "ft_out")]) == 0
    return root / "pre_out", root / "ft_out"


@criterion(9, "transfer plumbing: CLI pretrain -> finetune, byte-identical checkpoints, replay", budget=300)
def test_c09_transfer(tmp_path):
    config = tmp_path / "toy.yaml"
    config.write_text(yaml.safe_dump(TOY))
    pre_a, ft_a = _transfer_run(tmp_path / "a", config)
    pre_b, ft_b = _transfer_run(tmp_path / "b", config)
    runs = sorted(p.name for p in ft_a.iterdir())
    assert runs == ["finetune-cgcnn-init-cgcnn_encoder-seed11", "finetune-moformer-init-moformer_encoder-seed11"]
    for ckpt in [pre_a / "moformer_encoder.ckpt", pre_a / "cgcnn_encoder.ckpt"] + [ft_a / r / "best.ckpt" for r in runs]:
        copy = tmp_path / "copy.ckpt"
        Checkpoint.load(ckpt).save(copy)
        assert copy.read_bytes() == ckpt.read_bytes()
    assert (pre_a / "loss.csv").read_bytes() == (pre_b / "loss.csv").read_bytes()
    for r in runs:
        assert (ft_a / r / "metrics.csv").read_bytes() == (ft_b / r / "metrics.csv").read_bytes()
        assert json.loads((ft_a / r / "summary.json").read_text())["n_train"] == 28


# 10 ------------------------------------------------------------------------------

@criterion(10, "split arithmetic: 7466 ids -> 5226/1119/1119")
def test_c10_split():
    parts = split_dataset([f"id{k}" for k in range(7466)])
    assert [len(p) for p in parts] == [5226, 1119, 1119]
