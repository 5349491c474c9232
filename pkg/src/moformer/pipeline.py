"""Command implementations shared by the CLI: manifests, model <-> checkpoint
conversion, and the pretrain / finetune / evaluate / embed / export flows."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, check_compatible
from .config import RunConfig, from_dict, require_paths
from .crystal import CgcnnConfig, GraphCache, GraphConfig, init_cgcnn
from .encoders import GraphEncoder, TextEncoder
from .errors import DataError, MalformedMofId, ModalityMismatch, MoformerError
from .mofid import Vocabulary, build_vocabulary, parse_mofid
from .pretrain import PretrainModel, PretrainSettings, pretrain, write_loss_csv
from .regression import (
    LabeledRecord,
    Regressor,
    Standardizer,
    TrainPlan,
    evaluate,
    finetune,
    write_metrics,
    write_predictions,
)
from .rng import stream
from .transformer import TransformerConfig, attention_records, init_encoder, write_attention_file

log = logging.getLogger(__name__)


# --- manifests ---------------------------------------------------------------


@dataclass
class ManifestRow:
    row: int
    id: str
    mofid: str | None
    cif_path: str | None
    target: float | None


def read_manifest(path: str | Path, need_target: bool = False) -> list[ManifestRow]:
    """Read a delimited manifest with an ``id`` column and optional ``mofid``,
    ``cif_path`` and ``target`` columns.  Relative CIF paths resolve against
    the manifest's directory.  Data rows are numbered from 1."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from None
    try:
        dialect = csv.Sniffer().sniff(text.splitlines()[0] if text else "", delimiters=",\t;")
    except csv.Error:
        dialect = csv.excel
    reader = csv.DictReader(text.splitlines(), dialect=dialect)
    cols = set(reader.fieldnames or [])
    if "id" not in cols:
        raise DataError(f"{path}: manifest needs an 'id' column (found {sorted(cols)})")
    if need_target and "target" not in cols:
        raise DataError(f"{path}: labeled manifest needs a 'target' column")
    rows, seen = [], set()
    for n, rec in enumerate(reader, start=1):
        rid = (rec.get("id") or "").strip()
        if not rid:
            raise DataError(f"{path}: row {n} has an empty id")
        if rid in seen:
            raise DataError(f"{path}: row {n} repeats id {rid!r}")
        seen.add(rid)
        cif = (rec.get("cif_path") or "").strip() or None
        if cif is not None and not Path(cif).is_absolute():
            cif = str((path.parent / cif).resolve())
        target = None
        raw_t = (rec.get("target") or "").strip()
        if raw_t:
            try:
                target = float(raw_t)
            except ValueError:
                raise DataError(f"{path}: row {n} has a non-numeric target {raw_t!r}") from None
            if not math.isfinite(target):
                raise DataError(f"{path}: row {n} has a non-finite target")
        elif need_target:
            raise DataError(f"{path}: row {n} has no target")
        rows.append(ManifestRow(n, rid, (rec.get("mofid") or "").strip() or None, cif, target))
    return rows


def parse_rows(rows: list[ManifestRow]):
    out = []
    for r in rows:
        if r.mofid is None:
            raise MalformedMofId(f"row {r.row} ({r.id}): missing mofid")
        try:
            out.append(parse_mofid(r.mofid))
        except MoformerError as e:
            raise type(e)(f"row {r.row} ({r.id}): {e}") from None
    return out


def check_modality(rows: list[ManifestRow], kind: str) -> None:
    """Fail before any training if a record lacks the input its branch reads."""
    for r in rows:
        if kind == "moformer" and not r.mofid:
            raise ModalityMismatch(f"row {r.row} ({r.id}): moformer branch needs a mofid")
        if kind == "cgcnn":
            if not r.cif_path:
                raise ModalityMismatch(f"row {r.row} ({r.id}): cgcnn branch needs a cif_path")
            if not Path(r.cif_path).exists():
                raise DataError(f"row {r.row} ({r.id}): CIF file not found: {r.cif_path}")


def featurize(encoder, rows: list[ManifestRow]) -> list:
    items = []
    for r in rows:
        try:
            items.append(encoder.featurize(r.mofid, r.cif_path))
        except MoformerError as e:
            raise type(e)(f"row {r.row} ({r.id}): {e}") from None
    return items


# --- encoders from config / checkpoint ----------------------------------------


def transformer_config(cfg: RunConfig, vocab_size: int) -> TransformerConfig:
    t = cfg.transformer
    return TransformerConfig(vocab_size, t.d_emb, t.n_heads, t.n_layers, t.d_ff, t.max_len)


def graph_config(cfg: RunConfig) -> GraphConfig:
    c = cfg.cgcnn
    return GraphConfig(c.r_cut, c.m_max, c.gauss_step, c.gauss_width)


def cgcnn_config(cfg: RunConfig) -> CgcnnConfig:
    c = cfg.cgcnn
    return CgcnnConfig(c.atom_fea_len, c.n_conv, c.embed_size, len(graph_config(cfg).centers))


def graph_cache(cfg: RunConfig) -> GraphCache | None:
    return GraphCache(cfg.data.graph_cache, graph_config(cfg)) if cfg.data.graph_cache else None


def new_text_encoder(cfg: RunConfig, vocab: Vocabulary, seed: int) -> TextEncoder:
    state = init_encoder(transformer_config(cfg, len(vocab)), stream(seed, "init.moformer"))
    return TextEncoder(state, vocab)


def new_graph_encoder(cfg: RunConfig, seed: int) -> GraphEncoder:
    state = init_cgcnn(cgcnn_config(cfg), stream(seed, "init.cgcnn"))
    return GraphEncoder(state, graph_config(cfg), graph_cache(cfg))


def _load_params(params: dict[str, ad.Tensor], tensors: dict[str, np.ndarray], what: str) -> None:
    check_compatible({k: v.shape for k, v in params.items()}, tensors, what)
    for k, p in params.items():
        p.data = tensors[k].copy()


def encoder_checkpoint(encoder, cfg: RunConfig, source: str, adam=None) -> Checkpoint:
    meta = {"source": source}
    if encoder.kind == "moformer":
        meta["vocab"] = list(encoder.vocab.tokens)
    tensors = {k: v.data for k, v in encoder.params.items()}
    return Checkpoint(f"encoder/{encoder.kind}", cfg.to_dict(), tensors, meta, adam)


def encoder_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig | None = None, prefix: str = ""):
    """Rebuild an encoder from checkpoint weights.

    The architecture comes from ``cfg`` when given (so a mismatch with the
    stored weights is reported shape by shape), else from the checkpoint.
    """
    kind = ckpt.kind.split("/", 1)[1]
    arch = cfg if cfg is not None else from_dict(ckpt.config)
    tensors = {k[len(prefix):]: v for k, v in ckpt.tensors.items() if k.startswith(prefix)}
    what = f"{ckpt.kind} checkpoint"
    if kind == "moformer":
        vocab = Vocabulary(ckpt.meta["vocab"])
        state = init_encoder(transformer_config(arch, len(vocab)), np.random.default_rng(0))
        _load_params(state.params, tensors, what)
        return TextEncoder(state, vocab)
    state = init_cgcnn(cgcnn_config(arch), np.random.default_rng(0))
    _load_params(state.params, tensors, what)
    return GraphEncoder(state, graph_config(arch), graph_cache(arch))


def regressor_checkpoint(model: Regressor, cfg: RunConfig, meta: dict) -> Checkpoint:
    meta = dict(meta)
    meta["scaler"] = {"mean": model.scaler.mean, "std": model.scaler.std}
    if model.encoder.kind == "moformer":
        meta["vocab"] = list(model.encoder.vocab.tokens)
    tensors = {k: v.data for k, v in model.params.items()}
    return Checkpoint(f"regressor/{model.encoder.kind}", cfg.to_dict(), tensors, meta)


def regressor_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig | None = None) -> Regressor:
    encoder = encoder_from_checkpoint(ckpt, cfg, prefix="encoder.")
    head_tensors = {k: v for k, v in ckpt.tensors.items() if k.startswith("head.")}
    head = {k: ad.parameter(v.copy(), k) for k, v in sorted(head_tensors.items())}
    s = ckpt.meta["scaler"]
    return Regressor(encoder, head, Standardizer(s["mean"], s["std"]))


def any_encoder_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig | None = None):
    if ckpt.kind.startswith("regressor/"):
        return regressor_from_checkpoint(ckpt, cfg).encoder
    if ckpt.kind.startswith("encoder/"):
        return encoder_from_checkpoint(ckpt, cfg)
    raise DataError(f"unknown checkpoint kind {ckpt.kind!r}")


# --- commands ----------------------------------------------------------------


def cmd_build_vocab(manifest: str | Path, out_path: str | Path) -> Vocabulary:
    rows = read_manifest(manifest)
    vocab = build_vocabulary(parse_rows(rows))
    vocab.save(out_path)
    return vocab


def _vocab_for(cfg: RunConfig, rows: list[ManifestRow]) -> Vocabulary:
    if cfg.data.vocab:
        return Vocabulary.load(cfg.data.vocab)
    return build_vocabulary(parse_rows(rows))


def _prepare_dir(path: Path, cfg: RunConfig) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    cfg.dump(path / "config.yaml")
    return path


def cmd_pretrain(cfg: RunConfig, out_dir: str | Path | None = None) -> dict:
    """Joint pretraining; writes both encoder checkpoints and the loss CSV."""
    cfg = cfg.resolved()
    require_paths(cfg, ("data", "pretrain_manifest"))
    rows = read_manifest(cfg.data.pretrain_manifest)
    check_modality(rows, "moformer")
    check_modality(rows, "cgcnn")
    vocab = _vocab_for(cfg, rows)
    text = new_text_encoder(cfg, vocab, cfg.seed)
    graph = new_graph_encoder(cfg, cfg.seed)
    seqs = featurize(text, rows)
    graphs = featurize(graph, rows)
    p = cfg.pretrain
    settings = PretrainSettings(
        p.batch_size, p.lr, p.epochs, tuple(p.fractions), p.weight_decay, p.lam,
        p.projector_dim, p.centered, p.max_steps, cfg.seed,
    )
    model = PretrainModel(graph, text, settings)
    out = _prepare_dir(Path(out_dir or Path(cfg.output_dir) / f"pretrain-seed{cfg.seed}"), cfg)
    vocab.save(out / "vocab.txt")
    result = pretrain(model, {r.id: (s, g) for r, s, g in zip(rows, seqs, graphs)})
    write_loss_csv(result.steps, out / "loss.csv")
    paths = {
        "moformer": out / "moformer_encoder.ckpt",
        "cgcnn": out / "cgcnn_encoder.ckpt",
        "loss_csv": out / "loss.csv",
    }
    encoder_checkpoint(text, cfg, "pretrain").save(paths["moformer"])
    encoder_checkpoint(graph, cfg, "pretrain").save(paths["cgcnn"])
    log.info("pretraining finished after %d steps", len(result.steps))
    return {"dir": out, "steps": len(result.steps), **paths}


def _labeled_records(encoder, rows: list[ManifestRow]) -> list[LabeledRecord]:
    items = featurize(encoder, rows)
    return [LabeledRecord(r.id, item, r.target) for r, item in zip(rows, items)]


def _run_name(cfg: RunConfig, seed: int) -> str:
    ft = cfg.finetune
    init = "scratch" if not ft.init else f"init-{Path(ft.init).stem}"
    subset = f"-n{ft.train_subset}" if ft.train_subset is not None else ""
    return f"finetune-{ft.encoder}-{init}{subset}-seed{seed}"


def cmd_finetune(cfg: RunConfig, out_dir: str | Path | None = None) -> list[dict]:
    """Fine-tune ``finetune.repeats`` times with consecutive seeds."""
    cfg = cfg.resolved()
    require_paths(cfg, ("data", "finetune_manifest"))
    ft = cfg.finetune
    if ft.init:
        require_paths(cfg, ("finetune", "init"))
    rows = read_manifest(cfg.data.finetune_manifest, need_target=True)
    check_modality(rows, ft.encoder)
    init_ckpt = None
    if ft.init:
        init_ckpt = Checkpoint.load(ft.init)
        if init_ckpt.kind != f"encoder/{ft.encoder}":
            raise ModalityMismatch(
                f"--init checkpoint holds {init_ckpt.kind}, but finetune.encoder is {ft.encoder}"
            )
    root = Path(out_dir) if out_dir else Path(cfg.output_dir)
    results = []
    for rep in range(ft.repeats):
        seed = cfg.seed + rep
        if init_ckpt is not None:
            encoder = encoder_from_checkpoint(init_ckpt, cfg)
        elif ft.encoder == "moformer":
            encoder = new_text_encoder(cfg, _vocab_for(cfg, rows), seed)
        else:
            encoder = new_graph_encoder(cfg, seed)
        records = _labeled_records(encoder, rows)
        plan = TrainPlan(
            ft.encoder, ft.init, ft.lr_encoder, ft.lr_head, ft.batch_size, ft.epochs,
            ft.weight_decay, tuple(ft.fractions), ft.remainder, ft.train_subset, seed, ft.standardize,
        )
        run_cfg = dataclasses.replace(cfg, seed=seed)
        out = _prepare_dir(root / _run_name(cfg, seed), run_cfg)
        result = finetune(plan, encoder, records)
        write_metrics(result.history, out / "metrics.csv")
        by_id = {r.id: r for r in records}
        test = [by_id[i] for i in result.splits["test"]]
        _, pred_rows = evaluate(result.model, test, plan.batch_size)
        write_predictions(pred_rows, out / "predictions.csv")
        meta = {
            "target_name": cfg.data.target_name,
            "target_unit": cfg.data.target_unit,
            "best_epoch": result.best_epoch,
            "n_train": len(result.splits["train"]),
        }
        ckpt_path = out / "best.ckpt"
        regressor_checkpoint(result.model, run_cfg, meta).save(ckpt_path)
        summary = {
            "seed": seed,
            "n_train": len(result.splits["train"]),
            "n_val": len(result.splits["val"]),
            "n_test": len(result.splits["test"]),
            "best_epoch": result.best_epoch,
            "val_mae": result.val_mae,
            "test_mae": result.test_mae,
            "target_unit": cfg.data.target_unit,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        log.info("seed %d: %d training records, best epoch %d, test MAE %.6g %s",
                 seed, summary["n_train"], result.best_epoch, result.test_mae, cfg.data.target_unit)
        results.append({**summary, "dir": out, "checkpoint": ckpt_path})
    return results


def cmd_evaluate(checkpoint: str | Path, manifest: str | Path, out_csv: str | Path) -> float:
    ckpt = Checkpoint.load(checkpoint)
    if not ckpt.kind.startswith("regressor/"):
        raise ModalityMismatch(f"evaluate needs a fine-tuned checkpoint, got {ckpt.kind}")
    model = regressor_from_checkpoint(ckpt)
    rows = read_manifest(manifest, need_target=True)
    check_modality(rows, model.encoder.kind)
    score, pred_rows = evaluate(model, _labeled_records(model.encoder, rows))
    write_predictions(pred_rows, out_csv)
    return score


def cmd_embed(checkpoint: str | Path, manifest: str | Path, out_csv: str | Path) -> np.ndarray:
    """One CSV row per record: id, then the encoder representation."""
    encoder = any_encoder_from_checkpoint(Checkpoint.load(checkpoint))
    rows = read_manifest(manifest)
    check_modality(rows, encoder.kind)
    items = featurize(encoder, rows)
    chunks = [encoder.embed(items[k : k + 32]).data for k in range(0, len(items), 32)]
    emb = np.concatenate(chunks) if chunks else np.zeros((0, encoder.out_dim))
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"e{k}" for k in range(encoder.out_dim)])
        for r, vec in zip(rows, emb):
            w.writerow([r.id] + [repr(float(x)) for x in vec])
    return emb


def cmd_attn_export(checkpoint: str | Path, mofid: str, out_path: str | Path) -> dict:
    encoder = any_encoder_from_checkpoint(Checkpoint.load(checkpoint))
    if encoder.kind != "moformer":
        raise ModalityMismatch("attention maps need a moformer checkpoint")
    data = attention_records(encoder.state, parse_mofid(mofid), encoder.vocab)
    write_attention_file(data, out_path)
    return data
