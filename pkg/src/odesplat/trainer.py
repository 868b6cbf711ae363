"""Warm-up, joint optimization, densification and checkpointing."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import AdamState, ContractError, Graph, NumericError, Var, adam_step
from .config import TrainConfig
from .decoder import DeformationVars, KernelDecoder
from .dynamics import DynamicsField, ode_solve
from .encoder import Grouping, LatentEncoder, LatentState, SceneBox, regroup_schedule
from .gaussians import ParticleSet, init_particles, init_unit_cube, quat_to_matrix
from .metrics import compute_loss, dssim, l1
from .nn import bind
from .render import Camera, KernelVars, render_image
from .scenes import Dataset, Frame

log = logging.getLogger(__name__)

KERNEL_GROUPS = {
    "gs.mu": "position",
    "gs.rot": "rotation",
    "gs.log_scale": "scale",
    "gs.opacity": "opacity",
    "gs.color": "color",
}
LOG_COLUMNS = ("step", "phase", "loss", "l1", "dssim", "n_particles")


def param_group(name: str) -> str:
    if name in KERNEL_GROUPS:
        return KERNEL_GROUPS[name]
    if name == "enc.hash":
        return "hash"
    if name.startswith("ode."):
        return "ode"
    return "network"


class Pipeline:
    """Encoder, latent dynamics and decoder around a set of Gaussian particles."""

    def __init__(self, cfg: TrainConfig, particles: ParticleSet, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng or np.random.default_rng(cfg.seed)
        self.encoder = LatentEncoder(cfg.encoder)
        g_dim, l_dim = self.encoder.global_dim, self.encoder.local_dim
        self.field = DynamicsField(g_dim, cfg.dynamics)
        if cfg.latent_space and cfg.neural_ode:
            in_dim = g_dim + l_dim
        elif cfg.latent_space:
            in_dim = g_dim + l_dim + 1
        else:
            in_dim = l_dim + 1
        dcfg = dataclasses.replace(cfg.decoder, affine=cfg.affine)
        self.decoder = KernelDecoder(in_dim, dcfg)
        self.params: dict[str, np.ndarray] = dict(particles.params())
        self.params.update(self.encoder.init(rng))
        if cfg.latent_space and cfg.neural_ode:
            self.params.update(self.field.init(rng))
        self.params.update(self.decoder.init(rng))
        self.box: SceneBox | None = None
        self.grouping: Grouping | None = None

    # -- particles ---------------------------------------------------------
    @property
    def particles(self) -> ParticleSet:
        p = self.params
        return ParticleSet(p["gs.mu"], p["gs.rot"], p["gs.log_scale"], p["gs.opacity"], p["gs.color"])

    def set_particles(self, ps: ParticleSet) -> None:
        self.params.update(ps.params())

    def __len__(self) -> int:
        return self.params["gs.mu"].shape[0]

    def prepare_latent(self) -> None:
        """Fix the hash-grid bounding box and build FPS/KNN groups from current centers."""
        mu = self.params["gs.mu"]
        self.box = SceneBox.from_points(mu)
        self.regroup()

    def regroup(self) -> None:
        if self.cfg.latent_space:
            self.grouping = self.encoder.grouping(self.params["gs.mu"])

    # -- forward -----------------------------------------------------------
    def latent(self, p: dict[str, Var], mu: Var, t: float) -> tuple[Var | None, Var]:
        """``(g_t, l)`` for the full model; ablations return the pieces they use."""
        cfg = self.cfg
        if self.box is None:
            raise ContractError("latent space not prepared; call prepare_latent() after warm-up")
        if not cfg.latent_space:
            return None, self.encoder.local_features(p, mu, self.box)
        g0, l = self.encoder(p, mu, self.box, self.grouping)
        if cfg.neural_ode:
            return ode_solve(self.field.bind(p), g0, t, cfg.solver), l
        return g0, l

    def features(self, p: dict[str, Var], mu: Var, t: float) -> Var:
        cfg = self.cfg
        n = mu.shape[0]
        g, l = self.latent(p, mu, t)
        parts = []
        if g is not None:
            parts.append(ad.broadcast_to(g.reshape(1, g.shape[0]), (n, g.shape[0])))
        parts.append(l)
        if not (cfg.latent_space and cfg.neural_ode):
            parts.append(mu.graph.constant(np.full((n, 1), float(t))))
        return ad.concat(parts, axis=1)

    def deformation(self, p: dict[str, Var], mu: Var, t: float) -> DeformationVars:
        return self.decoder(p, self.features(p, mu, t))

    def forward(self, graph: Graph, p: dict[str, Var], cam: Camera, t: float, deform: bool = True, aux: dict | None = None) -> Var:
        kv = KernelVars.from_params(p)
        d = self.deformation(p, kv.mu, t) if deform else None
        return render_image(kv, cam, d, rotation_update=self.cfg.decoder.rotation_update, aux=aux)

    def _const_graph(self):
        g = Graph()
        return g, {k: g.constant(v) for k, v in self.params.items()}

    def render(self, cam: Camera, t: float, deform: bool = True) -> np.ndarray:
        g, p = self._const_graph()
        return self.forward(g, p, cam, t, deform=deform and self.box is not None).value

    def deformation_at(self, t: float):
        g, p = self._const_graph()
        return self.deformation(p, p["gs.mu"], t).numpy()

    def deformed_positions(self, t: float) -> np.ndarray:
        if self.box is None:
            return self.params["gs.mu"].copy()
        d = self.deformation_at(t)
        mu = self.params["gs.mu"]
        return mu + np.einsum("nij,nj->ni", d.A, mu) + d.b

    def latent_state(self, t: float) -> LatentState:
        g, p = self._const_graph()
        gt, l = self.latent(p, p["gs.mu"], t)
        gv = np.zeros(0) if gt is None else gt.value
        return LatentState(gv, l.value)

    # -- persistence -------------------------------------------------------
    def arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        if self.box is not None:
            out["meta.box_lo"] = self.box.lo
            out["meta.box_hi"] = self.box.hi
        if self.grouping is not None:
            out["meta.group_centers"] = self.grouping.centers
            out["meta.group_members"] = self.grouping.groups
        return out

    @classmethod
    def from_arrays(cls, cfg: TrainConfig, arrays: dict[str, np.ndarray]) -> "Pipeline":
        ps = ParticleSet(arrays["gs.mu"], arrays["gs.rot"], arrays["gs.log_scale"], arrays["gs.opacity"], arrays["gs.color"])
        pipe = cls(cfg, ps)
        for k, v in arrays.items():
            if not k.startswith("meta."):
                pipe.params[k] = np.array(v, dtype=float)
        if "meta.box_lo" in arrays:
            pipe.box = SceneBox(arrays["meta.box_lo"], arrays["meta.box_hi"])
        if "meta.group_centers" in arrays:
            pipe.grouping = Grouping(arrays["meta.group_centers"].astype(np.int64), arrays["meta.group_members"].astype(np.int64))
        return pipe


@dataclass
class StepResult:
    step: int
    phase: str
    loss: float
    l1: float
    dssim: float
    n_particles: int


class Trainer:
    """Owns the pipeline, optimizer states and the step counter of one run."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset, particles: ParticleSet | None = None, init_points=None):
        self.cfg = cfg
        self.dataset = dataset
        self.rng = np.random.default_rng(cfg.seed)
        if particles is None:
            if cfg.init == "points":
                if init_points is None:
                    raise ContractError("init='points' needs an initial point set")
                pts = np.asarray(init_points, dtype=float)
                if len(pts) > cfg.init_count:
                    pts = pts[np.sort(self.rng.choice(len(pts), cfg.init_count, replace=False))]
                particles = init_particles(pts, self.rng, opacity=cfg.init_opacity)
            else:
                particles = init_unit_cube(cfg.init_count, self.rng)
        self.pipeline = Pipeline(cfg, particles, self.rng)
        self.step = 0
        self.phase = "warmup"
        self.adam: dict[str, AdamState] = {}
        self.history: list[StepResult] = []
        self.extent = float(np.linalg.norm(particles.mu - particles.mu.mean(axis=0), axis=1).max()) if len(particles) else 1.0
        self._reset_stats()

    # -- optimizer plumbing ------------------------------------------------
    def lr(self, group: str) -> float:
        c = self.cfg
        if group == "position":
            r = min(self.step / max(c.total_steps, 1), 1.0)
            lr = np.exp(np.log(c.lr_position) * (1 - r) + np.log(c.lr_position_final) * r)
            return float(lr * self.extent)
        return {
            "rotation": c.lr_rotation,
            "scale": c.lr_scale,
            "opacity": c.lr_opacity,
            "color": c.lr_color,
            "network": c.lr_network,
            "ode": c.lr_ode,
            "hash": c.lr_hash,
        }[group]

    def _state(self, group: str) -> AdamState:
        if group not in self.adam:
            self.adam[group] = AdamState(lr=self.lr(group))
        return self.adam[group]

    def _apply(self, grads: dict[str, np.ndarray]) -> None:
        by_group: dict[str, list[str]] = {}
        for name in grads:
            by_group.setdefault(param_group(name), []).append(name)
        for group in sorted(by_group):
            names = by_group[group]
            st = self._state(group)
            params = {n: self.pipeline.params[n] for n in names}
            adam_step(params, {n: grads[n] for n in names}, st, lr=self.lr(group))

    def _reset_stats(self) -> None:
        n = len(self.pipeline)
        self.grad_accum = np.zeros(n)
        self.grad_denom = np.zeros(n)

    # -- steps -------------------------------------------------------------
    def _step(self, frame: Frame, joint: bool) -> StepResult:
        cfg = self.cfg
        pipe = self.pipeline
        cam = self.dataset.cameras[frame.camera]
        g = Graph()
        trainable = (lambda n: True) if joint else (lambda n: n.startswith("gs."))
        p = bind(g, pipe.params, trainable)
        aux: dict = {}
        stage = "forward"
        try:
            img = pipe.forward(g, p, cam, frame.t, deform=joint, aux=aux)
            loss = compute_loss(img, frame.image, cfg.lambda_dssim)
            stage = "backward"
            grads = g.backward(loss)
        except NumericError as exc:
            raise NumericError(exc.node_id, f"{stage}: {exc.op}", exc.where) from exc
        names = [n for n in pipe.params if trainable(n)]
        self._apply({n: grads[p[n]] for n in names})
        if "mean2d" in aux:
            gm = grads[aux["mean2d"]]
            order = aux["order"]
            self.grad_accum[order] += np.linalg.norm(gm, axis=1)
            self.grad_denom[order] += 1
        self.step += 1
        img_v = img.value
        res = StepResult(self.step, "joint" if joint else "warmup", float(loss.value), l1(img_v, frame.image), dssim(img_v, frame.image), len(pipe))
        self.history.append(res)
        self._maybe_densify()
        if joint and cfg.latent_space and regroup_schedule("iteration", self.step, cfg.regroup_interval):
            pipe.regroup()
        return res

    def warmup_frames(self) -> list[Frame]:
        """Views of the earliest timestamp bucket."""
        if not self.dataset.frames:
            raise ContractError("dataset has no frames")
        t0 = min(f.t for f in self.dataset.frames)
        frames = [f for f in self.dataset.frames if f.t == t0]
        if not frames:
            raise ContractError("empty warm-up bucket")
        return frames

    def warmup(self, steps: int | None = None) -> ParticleSet:
        steps = self.cfg.warmup_steps if steps is None else steps
        frames = self.warmup_frames()
        for _ in range(steps):
            self._step(frames[self.rng.integers(len(frames))], joint=False)
            self._log()
        return self.pipeline.particles

    def start_joint(self) -> None:
        self.phase = "joint"
        self.pipeline.prepare_latent()

    def train_step(self, frame: Frame | None = None) -> StepResult:
        if self.phase != "joint":
            raise ContractError("train_step requires a completed warm-up (call start_joint())")
        if frame is None:
            frame = self.sample_frame()
        res = self._step(frame, joint=True)
        self._log()
        return res

    def sample_frame(self) -> Frame:
        """Uniform over training timestamps, then uniform over views at that time."""
        ts = self.dataset.timestamps
        t = ts[self.rng.integers(len(ts))]
        frames = [f for f in self.dataset.frames if f.t == t]
        return frames[self.rng.integers(len(frames))]

    def run(self, checkpoint_dir=None) -> list[StepResult]:
        if self.phase == "warmup":
            self.warmup(self.cfg.warmup_steps - self.step)
            self.start_joint()
        while self.step < self.cfg.total_steps:
            self.train_step()
            every = self.cfg.checkpoint_every
            if checkpoint_dir is not None and every and self.step % every == 0:
                self.save(Path(checkpoint_dir) / f"step_{self.step:06d}.ckpt")
        return self.history

    def _log(self) -> None:
        if self.cfg.log_every and self.step % self.cfg.log_every == 0:
            r = self.history[-1]
            log.info("step %d [%s] loss %.5f n=%d", r.step, r.phase, r.loss, r.n_particles)

    # -- densification -----------------------------------------------------
    def _maybe_densify(self) -> None:
        c = self.cfg
        if not c.densify or self.step < c.densify_from or self.step > c.densify_stop:
            return
        if self.step % c.densify_interval:
            return
        self.densify_prune()

    def densify_prune(self) -> list[str]:
        """Clone small / split large high-gradient particles and drop transparent ones.

        Returns the events emitted (``"clone"``, ``"split"``, ``"delete"``).
        """
        c = self.cfg
        pipe = self.pipeline
        seen = self.grad_denom > 0
        if not seen.any():
            return []
        ps = pipe.particles
        n = len(ps)
        grad = np.where(seen, self.grad_accum / np.maximum(self.grad_denom, 1), 0.0)
        hot = grad >= c.densify_grad_threshold
        big = ps.scales.max(axis=1) > c.percent_dense * self.extent
        room = max(c.max_particles - n, 0)
        clone_idx = np.nonzero(hot & ~big)[0][:room]
        room -= len(clone_idx)
        split_idx = np.nonzero(hot & big)[0][: room]
        events = []
        new_parts = []
        if len(clone_idx):
            new_parts.append(ps.subset(clone_idx))
            events.append("clone")
        if len(split_idx):
            src = ps.subset(np.repeat(split_idx, 2))
            noise = self.rng.normal(size=(len(src), 3)) * src.scales
            src.mu = src.mu + np.einsum("nij,nj->ni", quat_to_matrix(src.unit_rot), noise)
            src.log_scale = src.log_scale - np.log(1.6)
            new_parts.append(src)
            events.append("split")
        keep = np.ones(n, dtype=bool)
        keep[split_idx] = False
        keep &= ps.opacities >= c.prune_opacity
        if (~keep & ~np.isin(np.arange(n), split_idx)).any():
            events.append("delete")
        if not events:
            self._reset_stats()
            return []
        out = ps.subset(np.nonzero(keep)[0])
        for extra in new_parts:
            out = out.concatenate(extra)
        added = len(out) - int(keep.sum())
        pipe.set_particles(out)
        self._remap_moments(np.nonzero(keep)[0], added)
        self._reset_stats()
        if self.phase == "joint" and any(regroup_schedule(e) for e in events):
            pipe.regroup()
        return events

    def _remap_moments(self, kept: np.ndarray, added: int) -> None:
        for st in self.adam.values():
            for name in list(st.first_moment):
                if not name.startswith("gs."):
                    continue
                for mom in (st.first_moment, st.second_moment):
                    old = mom[name][kept]
                    pad = np.zeros((added,) + old.shape[1:])
                    mom[name] = np.concatenate([old, pad])

    # -- persistence -------------------------------------------------------
    def save(self, path) -> None:
        meta = {
            "config": self.cfg.to_dict(),
            "step": self.step,
            "phase": self.phase,
            "extent": self.extent,
            "rng": self.rng.bit_generator.state,
        }
        arrays = self.pipeline.arrays()
        arrays["meta.grad_accum"] = self.grad_accum
        arrays["meta.grad_denom"] = self.grad_denom
        checkpoint.save(path, arrays, self.adam, meta)

    @classmethod
    def load(cls, path, dataset: Dataset) -> "Trainer":
        arrays, adam, meta = checkpoint.load(path)
        cfg = TrainConfig.from_dict(meta["config"])
        pipe = Pipeline.from_arrays(cfg, arrays)
        tr = cls(cfg, dataset, particles=pipe.particles)
        tr.pipeline = pipe
        tr.adam = adam
        tr.step = int(meta["step"])
        tr.phase = meta["phase"]
        tr.extent = float(meta["extent"])
        tr.rng.bit_generator.state = meta["rng"]
        tr.grad_accum = arrays["meta.grad_accum"]
        tr.grad_denom = arrays["meta.grad_denom"]
        return tr

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.history:
                w.writerow([r.step, r.phase, f"{r.loss:.10g}", f"{r.l1:.10g}", f"{r.dssim:.10g}", r.n_particles])


def load_pipeline(path) -> Pipeline:
    arrays, _, meta = checkpoint.load(path)
    return Pipeline.from_arrays(TrainConfig.from_dict(meta["config"]), arrays)
