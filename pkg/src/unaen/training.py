"""Unsupervised alternating training of UNAEN on unpaired pools."""

from __future__ import annotations

import contextlib
import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Adam, Tensor
from .data import Dataset
from .losses import (
    LossWeights,
    adv_loss_discriminator,
    adv_loss_generator,
    cycle_loss,
    total_generator_loss,
)
from .metrics import MetricReport, evaluate_set
from .models import ABLATIONS, ModelConfig, UnaenModel, reduce_artifacts, restore

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.unae"
MANIFEST_NAME = "model.json"
LOG_NAME = "train.log"
LOG_HEADER = "epoch step loss_g loss_d val_ssim val_psnr lr"


class NumericError(RuntimeError):
    """A loss became NaN or infinite."""

    def __init__(self, step: int, which: str, value: float):
        super().__init__(f"non-finite {which} loss ({value}) at step {step}")
        self.step = step


class ConfigMismatchError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 1e-4
    lr_halving_period: int = 10
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    gen_steps_per_disc_step: int = 2
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    loss_form: str = "sqrt"
    disc_loss_form: str = "squared"
    ablation: str = "explicit_with_gr"
    # without G_r: "adversarial" keeps only the G_e adversarial term,
    # "identity_cycle" also keeps the cycle term with G_r replaced by identity
    without_gr_objective: str = "adversarial"
    # "joint": real and fake samples share one discriminator batch (and so one
    # set of batch-norm statistics); "separate": one forward pass each
    disc_batching: str = "joint"
    max_steps: Optional[int] = None
    # discriminator learning rate; None shares ``lr``
    disc_lr: Optional[float] = None
    # decay of an exponential moving average of G_e weights used for
    # validation and the best snapshot; None disables it
    ge_ema: Optional[float] = None
    # the first disc_warmup_steps steps update only the discriminators
    disc_warmup_steps: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        for name in ("epochs", "batch_size", "lr_halving_period", "gen_steps_per_disc_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0 or (self.disc_lr is not None and self.disc_lr <= 0):
            raise ValueError("TrainConfig.lr and disc_lr must be positive")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.without_gr_objective not in ("adversarial", "identity_cycle"):
            raise ValueError(f"unknown without_gr_objective {self.without_gr_objective!r}")
        if self.disc_batching not in ("joint", "separate"):
            raise ValueError(f"unknown disc_batching {self.disc_batching!r}")
        if self.disc_warmup_steps < 0:
            raise ValueError("disc_warmup_steps must be >= 0")
        if self.ge_ema is not None and not 0.0 < self.ge_ema < 1.0:
            raise ValueError(f"ge_ema must lie in (0, 1), got {self.ge_ema}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1 when given")

    def lr_at(self, epoch: int, disc: bool = False) -> float:
        """Learning rate for 0-based ``epoch``: halved every lr_halving_period epochs."""
        base = self.disc_lr if disc and self.disc_lr is not None else self.lr
        return base * 0.5 ** (epoch // self.lr_halving_period)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    gen_steps: int = 0
    disc_steps: int = 0
    best_val_ssim: float = -math.inf
    best_epoch: int = -1
    history: List[dict] = field(default_factory=list)


class Trainer:
    """Owns a model, both optimizers and the training state."""

    def __init__(self, model: UnaenModel, cfg: TrainConfig):
        if model.cfg.ablation != cfg.ablation:
            raise ConfigMismatchError(
                f"model ablation {model.cfg.ablation!r} != train ablation {cfg.ablation!r}"
            )
        self.model = model
        self.cfg = cfg
        kw = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        self.opt_g = Adam(model.generator_parameters(), **kw)
        self.opt_d = Adam(model.discriminator_parameters(), **kw)
        self.state = TrainState()
        self.best_ge: Optional[Dict[str, np.ndarray]] = None
        self.ema_ge: Optional[Dict[str, np.ndarray]] = None
        if cfg.ge_ema is not None:
            self.ema_ge = {k: v.copy() for k, v in model.ge.state_dict().items()}

    # -- single steps ------------------------------------------------------

    def _scores(self, disc, real: Tensor, fake: Tensor):
        """Discriminator scores (real, fake)."""
        if self.cfg.disc_batching == "separate":
            return disc(real), disc(fake)
        n = real.shape[0]
        s = disc(ad.concat([real, fake]))
        return ad.batch_slice(s, 0, n), ad.batch_slice(s, n, s.shape[0])

    def _generator_loss(self, xa: Tensor, y: Tensor):
        m, cfg, w = self.model, self.cfg, self.cfg.weights
        x = reduce_artifacts(m, xa)
        _, fake_f = self._scores(m.df, y, x)
        if m.with_gr:
            xb = restore(m, x)
            _, fake_b = self._scores(m.db, xa.detach(), xb)
            return total_generator_loss(fake_f, fake_b, xa, xb, w, cfg.loss_form)
        loss = w.lambda_ge_adv * adv_loss_generator(fake_f, cfg.loss_form)
        if cfg.without_gr_objective == "identity_cycle":
            loss = loss + cycle_loss(xa, x, w)
        return loss

    def generator_step(self, batch_xa: np.ndarray, batch_y: np.ndarray) -> float:
        """One ADAM update of G_e (and G_r) with both discriminators held fixed.

        ``batch_y`` only enters as the real half of joint discriminator
        batches; with separate batching it is unused.
        """
        m = self.model
        xa = Tensor(_as_nchw(batch_xa))
        y = Tensor(_as_nchw(batch_y))
        with contextlib.ExitStack() as stack:
            for d in m.discriminators():
                stack.enter_context(d.frozen())
            loss = self._generator_loss(xa, y)
        value = loss.item()
        self._check_finite(value, "generator")
        self.opt_g.zero_grad()
        loss.backward()
        self.opt_g.step()
        self.opt_g.zero_grad()
        if self.ema_ge is not None:
            d = np.float32(self.cfg.ge_ema)
            for k, v in m.ge.state_dict().items():
                self.ema_ge[k] = d * self.ema_ge[k] + (np.float32(1) - d) * v
        self.state.gen_steps += 1
        self.state.global_step += 1
        return value

    def discriminator_step(self, batch_xa: np.ndarray, batch_y: np.ndarray) -> float:
        """One ADAM update of D_f (and D_b) on detached generator outputs."""
        m, form = self.model, self.cfg.disc_loss_form
        xa = Tensor(_as_nchw(batch_xa))
        y = Tensor(_as_nchw(batch_y))
        with ad.no_grad():
            x = reduce_artifacts(m, xa)
            xb = restore(m, x) if m.with_gr else None
        loss = adv_loss_discriminator(*self._scores(m.df, y, x), form)
        if m.with_gr:
            loss = loss + adv_loss_discriminator(*self._scores(m.db, xa, xb), form)
        value = loss.item()
        self._check_finite(value, "discriminator")
        self.opt_d.zero_grad()
        loss.backward()
        self.opt_d.step()
        self.opt_d.zero_grad()
        self.state.disc_steps += 1
        self.state.global_step += 1
        return value

    def _check_finite(self, value: float, which: str) -> None:
        if not math.isfinite(value):
            raise NumericError(self.state.global_step, which, value)

    # -- epochs ------------------------------------------------------------

    def epoch_permutations(self, epoch: int, n_free: int, n_corrupt: int):
        """Independent shuffles of the two pools, derived from (seed, epoch)."""
        ss = np.random.SeedSequence([self.cfg.seed, epoch])
        s_free, s_corrupt = ss.spawn(2)
        return (
            np.random.default_rng(s_free).permutation(n_free),
            np.random.default_rng(s_corrupt).permutation(n_corrupt),
        )

    def step_schedule(self, n_batches: int) -> List[str]:
        r = self.cfg.gen_steps_per_disc_step
        return ["g" if i % (r + 1) < r else "d" for i in range(n_batches)]

    def run_epoch(self, dataset: Dataset) -> Dict[str, float]:
        cfg, st = self.cfg, self.state
        lr = cfg.lr_at(st.epoch)
        self.opt_g.lr = lr
        self.opt_d.lr = cfg.lr_at(st.epoch, disc=True)
        free, corrupt = dataset.train_free, dataset.train_corrupt
        perm_free, perm_corrupt = self.epoch_permutations(st.epoch, len(free), len(corrupt))
        bs = cfg.batch_size
        n_batches = min(len(free), len(corrupt)) // bs
        if n_batches == 0:
            raise ValueError(f"pools of {len(free)}/{len(corrupt)} images cannot fill a batch of {bs}")
        g_losses, d_losses = [], []
        for b, kind in enumerate(self.step_schedule(n_batches)):
            if cfg.max_steps is not None and st.global_step >= cfg.max_steps:
                break
            sl = slice(b * bs, (b + 1) * bs)
            batch_xa = corrupt[perm_corrupt[sl]]
            batch_y = free[perm_free[sl]]
            if kind == "g" and st.global_step >= cfg.disc_warmup_steps:
                g_losses.append(self.generator_step(batch_xa, batch_y))
            else:
                d_losses.append(self.discriminator_step(batch_xa, batch_y))
        return {
            "loss_g": float(np.mean(g_losses)) if g_losses else math.nan,
            "loss_d": float(np.mean(d_losses)) if d_losses else math.nan,
            "lr": lr,
        }

    def eval_ge_state(self) -> Dict[str, np.ndarray]:
        """G_e weights used for validation: the moving average if enabled."""
        if self.ema_ge is not None:
            return self.ema_ge
        return self.model.ge.state_dict()

    @contextlib.contextmanager
    def _eval_weights(self):
        if self.ema_ge is None:
            yield
            return
        live = {k: v.copy() for k, v in self.model.ge.state_dict().items()}
        self.model.ge.load_state_dict(self.ema_ge)
        try:
            yield
        finally:
            self.model.ge.load_state_dict(live)

    def validate(self, dataset: Dataset) -> MetricReport:
        with self._eval_weights():
            restored = infer(self.model, dataset.val_corrupt)
        return evaluate_set(zip(restored, dataset.val_clean))

    def fit(self, dataset: Dataset, out_dir=None) -> TrainState:
        cfg, st = self.cfg, self.state
        if len(dataset.train_free) == 0 or len(dataset.train_corrupt) == 0:
            raise ValueError("training needs nonempty clean and corrupted pools")
        log_path = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            write_manifest(out_dir / MANIFEST_NAME, self.model.cfg, cfg)
            log_path = out_dir / LOG_NAME
            if st.epoch == 0:
                log_path.write_text(LOG_HEADER + "\n")
        while st.epoch < cfg.epochs:
            if cfg.max_steps is not None and st.global_step >= cfg.max_steps:
                break
            losses = self.run_epoch(dataset)
            report = self.validate(dataset) if len(dataset.val_clean) else None
            record = {
                "epoch": st.epoch,
                "step": st.global_step,
                **losses,
                "val_ssim": report.ssim if report else math.nan,
                "val_psnr": report.psnr if report else math.nan,
            }
            st.history.append(record)
            if report is not None and report.ssim > st.best_val_ssim:
                st.best_val_ssim = report.ssim
                st.best_epoch = st.epoch
                self.best_ge = {k: v.copy() for k, v in self.eval_ge_state().items()}
            st.epoch += 1
            line = format_log_line(record)
            logger.info(line)
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(line + "\n")
                self.save(out_dir / CHECKPOINT_NAME)
        return st

    def best_model(self) -> UnaenModel:
        """A copy of the model with G_e set to the best-validation snapshot
        (or the moving average when nothing was validated)."""
        model = copy.deepcopy(self.model)
        snapshot = self.best_ge if self.best_ge is not None else self.ema_ge
        if snapshot is not None:
            model.ge.load_state_dict(snapshot)
        return model

    # -- checkpoints -------------------------------------------------------

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for net_name in ("ge", "gr", "df", "db"):
            net = getattr(self.model, net_name)
            if net is not None:
                for k, v in net.state_dict().items():
                    out[f"{net_name}.{k}"] = v
        for tag, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            out[f"{tag}.t"] = np.asarray(opt.t, dtype=np.float32)
            for i, (m, v) in enumerate(zip(opt.m, opt.v)):
                out[f"{tag}.m.{i}"] = m
                out[f"{tag}.v.{i}"] = v
        st = self.state
        out["state.counters"] = np.asarray(
            [st.epoch, st.global_step, st.gen_steps, st.disc_steps, st.best_epoch], dtype=np.float32
        )
        out["state.best_val_ssim"] = np.asarray(st.best_val_ssim, dtype=np.float32)
        if self.best_ge is not None:
            for k, v in self.best_ge.items():
                out[f"best.ge.{k}"] = v
        if self.ema_ge is not None:
            for k, v in self.ema_ge.items():
                out[f"ema.ge.{k}"] = v
        return out

    def save(self, path) -> str:
        return checkpoint.save(path, self.state_tensors())

    def load(self, path) -> None:
        tensors = checkpoint.load(path)
        for net_name in ("ge", "gr", "df", "db"):
            net = getattr(self.model, net_name)
            if net is not None:
                prefix = f"{net_name}."
                net.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        for tag, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            opt.t = int(tensors[f"{tag}.t"].item())
            for i in range(len(opt.params)):
                opt.m[i][...] = tensors[f"{tag}.m.{i}"]
                opt.v[i][...] = tensors[f"{tag}.v.{i}"]
        c = tensors["state.counters"].astype(np.int64)
        st = self.state
        st.epoch, st.global_step, st.gen_steps, st.disc_steps, st.best_epoch = (int(v) for v in c)
        st.best_val_ssim = float(tensors["state.best_val_ssim"].item())
        best = {k[len("best.ge."):]: v for k, v in tensors.items() if k.startswith("best.ge.")}
        self.best_ge = best or None
        if self.ema_ge is not None:
            ema = {k[len("ema.ge."):]: v for k, v in tensors.items() if k.startswith("ema.ge.")}
            if set(ema) != set(self.ema_ge):
                raise checkpoint.CheckpointError("checkpoint has no matching G_e moving average")
            self.ema_ge = {k: np.array(v, dtype=np.float32) for k, v in ema.items()}


def _as_nchw(batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim == 3:
        batch = batch[:, None]
    if batch.ndim != 4:
        raise ValueError(f"expected [N, H, W] or [N, C, H, W] images, got shape {batch.shape}")
    return batch


def format_log_line(r: dict) -> str:
    return (
        f"{r['epoch']} {r['step']} {r['loss_g']:.6f} {r['loss_d']:.6f} "
        f"{r['val_ssim']:.6f} {r['val_psnr']:.4f} {r['lr']:.6g}"
    )


def train(model: UnaenModel, dataset: Dataset, cfg: TrainConfig, out_dir=None) -> Trainer:
    """Train ``model`` in place and return the trainer (state, best snapshot)."""
    trainer = Trainer(model, cfg)
    trainer.fit(dataset, out_dir)
    return trainer


def infer(model: UnaenModel, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """MA-reduced images clipped to [0, 1], in input order. Needs only G_e."""
    arr = _as_nchw(images)
    outs = []
    with ad.no_grad():
        for i in range(0, len(arr), batch_size):
            outs.append(reduce_artifacts(model, Tensor(arr[i : i + batch_size]), clip=True).data)
    out = np.concatenate(outs) if outs else np.zeros_like(arr)
    return out[:, 0] if np.ndim(images) == 3 else out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def write_manifest(path, model_cfg: ModelConfig, train_cfg: Optional[TrainConfig] = None) -> None:
    doc = {"model": model_cfg.to_dict()}
    if train_cfg is not None:
        doc["train"] = train_cfg.to_dict()
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def load_for_inference(run_dir, expected: Optional[ModelConfig] = None, use_best: bool = True) -> UnaenModel:
    """Rebuild the model from a training directory.

    If ``expected`` is given and differs from the stored config the load is
    refused and both configs are shown.
    """
    run_dir = Path(run_dir)
    stored = ModelConfig.from_dict(read_manifest(run_dir / MANIFEST_NAME)["model"])
    if expected is not None and expected.to_dict() != stored.to_dict():
        raise ConfigMismatchError(
            "checkpoint config does not match the requested model\n"
            f"checkpoint: {json.dumps(stored.to_dict(), sort_keys=True)}\n"
            f"requested:  {json.dumps(expected.to_dict(), sort_keys=True)}"
        )
    model = UnaenModel(stored)
    tensors = checkpoint.load(run_dir / CHECKPOINT_NAME)
    prefix = "best.ge." if use_best and any(k.startswith("best.ge.") for k in tensors) else "ge."
    model.ge.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    return model


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    ablation: str
    ssim: float
    psnr: float


def run_ablation(
    dataset: Dataset,
    base_model: ModelConfig,
    base_train: TrainConfig,
    ablations: Sequence[str] = ABLATIONS,
) -> List[AblationRow]:
    """Train every ablation with the same seeds and budget; test-set metrics in
    ablation order."""
    rows = []
    for ablation in ablations:
        mcfg = ModelConfig.from_dict({**copy.deepcopy(base_model.to_dict()), "ablation": ablation})
        tcfg = TrainConfig.from_dict({**copy.deepcopy(base_train.to_dict()), "ablation": ablation})
        trainer = train(UnaenModel(mcfg), dataset, tcfg)
        best = trainer.best_model()
        report = evaluate_set(zip(infer(best, dataset.test_corrupt), dataset.test_clean))
        rows.append(AblationRow(ablation, report.ssim, report.psnr))
    return rows
