"""Mini-batch training with hardest-negative triplet loss and Adam.

Checkpoints are a small versioned binary::

    b"SGMC" | u32 version | u32 meta length | meta JSON (utf-8)
    | u32 blob count | blobs

and each blob is ``u32 name length | name | u32 ndim | u32 dims... |
float64 data (little-endian, row-major)``. Blob names are ``param/<name>``,
``adam_m/<name>`` and ``adam_v/<name>``.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, AdamState
from .errors import ContractError, DimensionError, TrainingDiverged
from .graphs import Corpus
from .matching import triplet_loss_hardest
from .model import Mode, ModelConfig, SgmModel
from .retrieval import CAPTION_RETRIEVAL, IMAGE_RETRIEVAL, evaluate_scores

CHECKPOINT_MAGIC = b"SGMC"
CHECKPOINT_VERSION = 1

LR_MSCOCO = 0.0005
LR_FLICKR30K = 0.0002


@dataclass
class TrainConfig:
    batch_size: int = 200
    lr: float = LR_FLICKR30K
    margin: float = 0.2
    epochs: int = 30
    seed: int = 0
    mode: Mode = Mode.SGM
    d1: int | None = None  # taken from the corpus when unset
    d2: int = 300
    dim: int = 1024
    gcn_layers: int = 1
    clip_norm: float | None = 10.0
    path_input: str = "embeddings"
    normalize: bool = False

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 for in-batch negatives, got {self.batch_size}")
        for name in ("d2", "dim", "gcn_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d1 is not None and self.d1 < 1:
            raise ValueError("d1 must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    def model_config(self, corpus: Corpus) -> ModelConfig:
        if self.d1 is not None and self.d1 != corpus.d1:
            raise DimensionError(f"config d1={self.d1} but corpus d1={corpus.d1}")
        return ModelConfig(d1=corpus.d1, c_o=corpus.c_o, c_r=corpus.c_r, vocab_size=corpus.vocab_size,
                           d2=self.d2, dim=self.dim, gcn_layers=self.gcn_layers, mode=self.mode,
                           path_input=self.path_input, normalize=self.normalize)


@dataclass
class Checkpoint:
    config: TrainConfig
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int
    history: list[dict] = field(default_factory=list)

    def model(self) -> SgmModel:
        m = SgmModel(self.model_config)
        for name, t in m.named_parameters().items():
            t.data[...] = self.params[name]
        return m

    # ------------------------------------------------------------------

    def to_bytes(self) -> bytes:
        meta = {
            "config": self.config.to_dict(),
            "model_config": self.model_config.to_dict(),
            "epoch": self.epoch,
            "history": self.history,
            "adam": {"lr": self.adam.lr, "beta1": self.adam.beta1, "beta2": self.adam.beta2,
                     "eps": self.adam.eps, "step": self.adam.step},
        }
        blobs = []
        for prefix, arrays in (("param/", self.params), ("adam_m/", self.adam.first_moment),
                               ("adam_v/", self.adam.second_moment)):
            for name, arr in arrays.items():
                blobs.append((prefix + name, np.asarray(arr, dtype=np.float64)))
        out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
        meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
        out += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(blobs))]
        for name, arr in blobs:
            nb = name.encode("utf-8")
            out += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim),
                    struct.pack(f"<{arr.ndim}I", *arr.shape),
                    np.ascontiguousarray(arr, dtype="<f8").tobytes()]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> Checkpoint:
        if raw[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint: magic {raw[:4]!r}")
        pos = 4

        def u32():
            nonlocal pos
            (v,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            return v

        version = u32()
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        n = u32()
        meta = json.loads(raw[pos:pos + n].decode("utf-8"))
        pos += n
        groups: dict[str, dict[str, np.ndarray]] = {"param/": {}, "adam_m/": {}, "adam_v/": {}}
        for _ in range(u32()):
            ln = u32()
            name = raw[pos:pos + ln].decode("utf-8")
            pos += ln
            ndim = u32()
            shape = tuple(u32() for _ in range(ndim))
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * count
            prefix = name[:name.index("/") + 1]
            groups[prefix][name[len(prefix):]] = arr
        a = meta["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
                         first_moment=groups["adam_m/"], second_moment=groups["adam_v/"])
        return cls(TrainConfig(**meta["config"]), ModelConfig(**meta["model_config"]),
                   groups["param/"], adam, meta["epoch"], meta["history"])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> Checkpoint:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def make_batches(n_pairs: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; a short final batch is dropped."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    perm = np.random.default_rng([seed, epoch]).permutation(n_pairs)
    return [perm[i:i + batch_size] for i in range(0, n_pairs - batch_size + 1, batch_size)]


def _first_non_finite(named: dict[str, ad.Tensor], attr: str) -> str | None:
    for name, t in named.items():
        arr = getattr(t, attr)
        if arr is not None and not np.all(np.isfinite(arr)):
            return name
    return None


class Trainer:
    def __init__(self, corpus: Corpus, cfg: TrainConfig, val_corpus: Corpus | None = None,
                 checkpoint: Checkpoint | None = None,
                 log: Callable[[dict], None] | None = None):
        if len(corpus) < cfg.batch_size:
            raise ContractError(f"corpus has {len(corpus)} pairs, fewer than batch_size {cfg.batch_size}")
        self.corpus = corpus
        self.val_corpus = val_corpus if val_corpus is not None else corpus
        self.cfg = cfg
        self.log = log
        if checkpoint is None:
            self.model = SgmModel(cfg.model_config(corpus), seed=cfg.seed)
            self.optimizer = Adam(self.model.named_parameters(), lr=cfg.lr)
            self.epoch = 0
            self.history: list[dict] = []
        else:
            self.model = checkpoint.model()
            self.optimizer = Adam(self.model.named_parameters(), lr=checkpoint.adam.lr,
                                  state=copy.deepcopy(checkpoint.adam))
            self.epoch = checkpoint.epoch
            self.history = copy.deepcopy(checkpoint.history)
        self.model.check_corpus(corpus)
        self.model.check_corpus(self.val_corpus)
        self.params = self.model.named_parameters()
        self.grad_mass = {name: 0.0 for name in self.params}

    def batch_scores(self, idx) -> ad.Tensor:
        images = [self.corpus.pairs[i][0] for i in idx]
        captions = [self.corpus.pairs[i][1] for i in idx]
        return self.model.batch_scores(images, captions)

    def batch_loss(self, idx) -> ad.Tensor:
        return triplet_loss_hardest(self.batch_scores(idx), self.cfg.margin)

    def step(self, idx) -> float:
        self.optimizer.zero_grad()
        scores = self.batch_scores(idx)
        # the hinge maps NaN to 0, so check before the loss can hide it
        loss = triplet_loss_hardest(scores, self.cfg.margin)
        if not (np.all(np.isfinite(scores.data)) and np.isfinite(loss.item())):
            bad = _first_non_finite(self.params, "data") or "score matrix"
            raise TrainingDiverged(f"non-finite loss at epoch {self.epoch}; first non-finite tensor: {bad}")
        ad.backward(loss)
        bad = _first_non_finite(self.params, "grad")
        if bad:
            raise TrainingDiverged(f"non-finite gradient at epoch {self.epoch} in {bad}")
        for name, t in self.params.items():
            self.grad_mass[name] += float(np.abs(t.grad).sum())
        if self.cfg.clip_norm is not None:
            norm = ad.global_grad_norm(self.params.values())
            if norm > self.cfg.clip_norm:
                factor = self.cfg.clip_norm / norm
                for t in self.params.values():
                    t.grad *= factor
        self.optimizer.step()
        bad = _first_non_finite(self.params, "data")
        if bad:
            raise TrainingDiverged(f"non-finite parameter after step at epoch {self.epoch}: {bad}")
        return loss.item()

    def validate(self) -> dict[str, float]:
        s = self.model.score_matrix(self.val_corpus)
        r_cap = evaluate_scores(s, CAPTION_RETRIEVAL).r_at[1]
        r_img = evaluate_scores(s, IMAGE_RETRIEVAL).r_at[1]
        return {"val_r1_caption": r_cap, "val_r1_image": r_img, "val_r1_sum": r_cap + r_img}

    def run_epoch(self) -> dict:
        batches = make_batches(len(self.corpus), self.cfg.batch_size, self.cfg.seed, self.epoch)
        losses = [self.step(idx) for idx in batches]
        self.epoch += 1
        record = {"epoch": self.epoch, "loss": float(np.mean(losses))}
        record.update(self.validate())
        self.history.append(record)
        if self.log is not None:
            self.log(record)
        return record

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(copy.deepcopy(self.cfg), copy.deepcopy(self.model.config),
                          {n: t.data.copy() for n, t in self.params.items()},
                          copy.deepcopy(self.optimizer.state), self.epoch, copy.deepcopy(self.history))

    def fit(self, epochs: int | None = None) -> Checkpoint:
        """Train and return the checkpoint with the best validation R@1 sum.

        Later epochs win ties, so a run that saturates validation returns its
        final state.
        """
        epochs = self.cfg.epochs if epochs is None else epochs
        best, best_val = None, -np.inf
        for _ in range(epochs):
            record = self.run_epoch()
            if record["val_r1_sum"] >= best_val:
                best, best_val = self.checkpoint(), record["val_r1_sum"]
        return best if best is not None else self.checkpoint()


def train(corpus: Corpus, cfg: TrainConfig, val_corpus: Corpus | None = None,
          log: Callable[[dict], None] | None = None) -> Checkpoint:
    return Trainer(corpus, cfg, val_corpus=val_corpus, log=log).fit()
