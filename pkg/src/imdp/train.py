"""Private adversarial training loop.

Each generator iteration runs n_d critic updates on fresh real batches,
then one generator update.  The critic path (trunk plus score head) is
the only part that touches real data: its batch gradient is perturbed
with calibrated Gaussian noise and its weights are projected back into
[-c_p, c_p] after every update.  The generator step additionally moves
the recovery head, and the shared trunk through the code-recovery
objective only, so no real-data gradient bypasses the noised path.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import privacy
from .autodiff import Graph, ParamStore, backward, forward
from .data import Dataset, batch_iter
from .latent import Codes, LatentSpec, MiBound, mi_lower_bound, sample_codes
from .nets import CriticQNet, GeneratorNet, NetConfig, build_critic, build_generator
from .privacy import AccountantState, PrivacySpec, accumulate, spent_epsilon


@dataclass(frozen=True)
class TrainConfig:
    """Everything needed to reproduce one training run."""

    n_g: int
    batch: int = 64
    n_d: int = 5
    lr_critic: float = 5e-5
    lr_gen: float = 1e-4
    lambda_cat: float = 1.0
    lambda_cont: float = 0.1
    epsilon: float = privacy.INF
    delta: float = 1e-5
    c_p: float = 0.01
    seed: int = 0
    dataset: str = ""
    latent: LatentSpec = field(default_factory=lambda: LatentSpec(z_dim=62))
    gen_hidden: tuple[int, ...] = (128, 128)
    trunk_hidden: tuple[int, ...] = (128, 128)

    def __post_init__(self):
        if self.n_g < 0:
            raise ValueError("n_g must be >= 0")
        if self.batch < 1 or self.n_d < 1:
            raise ValueError("batch and n_d must be >= 1")
        if self.lambda_cat < 0.0 or self.lambda_cont < 0.0:
            raise ValueError("mutual-information weights must be >= 0")
        if self.lr_critic <= 0.0 or self.lr_gen <= 0.0:
            raise ValueError("learning rates must be positive")

    def resolve_privacy(self, dataset_size: int) -> PrivacySpec:
        if self.batch > dataset_size:
            raise ValueError("batch exceeds dataset size")
        return PrivacySpec.calibrated(
            epsilon=self.epsilon, delta=self.delta, c_p=self.c_p,
            q=self.batch / dataset_size, n_d=self.n_d)


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    critic_loss: float
    gen_loss: float
    wdist: float
    l_i: float
    eps_spent: float
    wall_ms: float

    FIELDS = ("iteration", "critic_loss", "gen_loss", "wdist", "l_i", "eps_spent")

    def to_line(self) -> str:
        """Deterministic fields only; wall-clock stays out of replayable logs."""
        return " ".join(repr(getattr(self, f)) for f in self.FIELDS)


@dataclass
class MetricsLog:
    """Append-only per-iteration records, one per generator iteration."""

    records: list[MetricsRecord] = field(default_factory=list)

    def append(self, record: MetricsRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("iteration numbers must be strictly increasing")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def series(self, name: str) -> np.ndarray:
        if name not in MetricsRecord.FIELDS and name != "wall_ms":
            raise KeyError(f"unknown metrics field {name!r}")
        return np.array([getattr(r, name) for r in self.records])

    def to_text(self) -> str:
        header = "# " + " ".join(MetricsRecord.FIELDS)
        return "\n".join([header, *(r.to_line() for r in self.records)]) + "\n"


class RMSProp:
    """Root-mean-square gradient scaling without momentum."""

    def __init__(self, lr: float, decay: float = 0.99, eps: float = 1e-8):
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.cache: dict[str, np.ndarray] = {}

    def update(self, store: ParamStore, grads: dict[str, np.ndarray], names) -> None:
        for name in names:
            g = grads[name]
            c = self.cache.get(name)
            if c is None:
                c = self.cache[name] = np.zeros_like(g)
            c *= self.decay
            c += (1.0 - self.decay) * g * g
            store.params[name] -= self.lr * g / (np.sqrt(c) + self.eps)


def critic_loss(g: Graph, real_scores: int, fake_scores: int) -> int:
    """-(mean(real) - mean(fake)); its negation estimates the Wasserstein gap."""
    if g.shape(real_scores)[0] != g.shape(fake_scores)[0]:
        raise ValueError("real and fake batches must match")
    if g.shape(real_scores)[0] < 1:
        raise ValueError("empty batch")
    return g.neg(g.sub(g.mean(real_scores), g.mean(fake_scores)))


def generator_loss(g: Graph, fake_scores: int, mi: MiBound,
                   lambda_cat: float, lambda_cont: float) -> int:
    """-mean(fake scores) minus the weighted code-recovery bound."""
    loss = g.neg(g.mean(fake_scores))
    if mi.cat is not None:
        loss = g.sub(loss, g.scale(mi.cat, lambda_cat))
    if mi.cont is not None:
        loss = g.sub(loss, g.scale(mi.cont, lambda_cont))
    return loss


def mi_objective(g: Graph, mi: MiBound, lambda_cat: float, lambda_cont: float) -> int:
    """The recovery part of the generator loss, used to move trunk and head."""
    node = None
    if mi.cat is not None:
        node = g.scale(mi.cat, lambda_cat)
    if mi.cont is not None:
        part = g.scale(mi.cont, lambda_cont)
        node = part if node is None else g.add(node, part)
    if node is None:
        raise ValueError("no latent codes to recover")
    return g.neg(node)


@dataclass
class _CriticStepGraph:
    graph: Graph
    loss: int


@dataclass
class _GenStepGraph:
    graph: Graph
    loss: int
    mi_loss: int
    mi: MiBound


def _build_critic_graph(critic: CriticQNet, batch: int) -> _CriticStepGraph:
    g = Graph()
    x_real = g.input("x_real", (batch, critic.data_dim))
    x_fake = g.input("x_fake", (batch, critic.data_dim))
    s_real = critic.append_score_head(g, critic.append_trunk(g, x_real))
    s_fake = critic.append_score_head(g, critic.append_trunk(g, x_fake))
    return _CriticStepGraph(graph=g, loss=critic_loss(g, s_real, s_fake))


def _build_gen_graph(gen: GeneratorNet, critic: CriticQNet, spec: LatentSpec,
                     batch: int, lambda_cat: float, lambda_cont: float) -> _GenStepGraph:
    g = Graph()
    gen_in = g.input("gen_in", (batch, gen.input_width))
    x_fake = gen.append_to_graph(g, gen_in)
    trunk = critic.append_trunk(g, x_fake)
    score = critic.append_score_head(g, trunk)
    cat_nodes, cont_node = critic.append_q_heads(g, trunk)
    cat_targets = [g.input(f"cat{i}", (batch, k))
                   for i, k in enumerate(spec.categorical)]
    cont_target = g.input("cont", (batch, spec.n_cont)) if spec.n_cont else None
    mi = mi_lower_bound(g, spec, cat_nodes, cat_targets, cont_node, cont_target)
    loss = generator_loss(g, score, mi, lambda_cat, lambda_cont)
    return _GenStepGraph(graph=g, loss=loss,
                         mi_loss=mi_objective(g, mi, lambda_cat, lambda_cont), mi=mi)


@dataclass
class Trainer:
    """Holds the nets, graphs, optimizer state, and rng streams of one run."""

    config: TrainConfig
    gen: GeneratorNet
    critic: CriticQNet
    spec: PrivacySpec
    store: ParamStore
    opt_critic: RMSProp
    opt_gen: RMSProp
    codes_rng: np.random.Generator
    noise_rng: np.random.Generator
    critic_graph: _CriticStepGraph
    gen_graph: _GenStepGraph
    last_wdist: float = 0.0
    last_critic_loss: float = 0.0

    def critic_step(self, x_real: np.ndarray) -> None:
        """One noisy, clipped critic update on a real batch."""
        cfg = self.config
        codes = sample_codes(cfg.latent, cfg.batch, self.codes_rng)
        gg, g_in, g_out = self.gen._graph(cfg.batch)
        x_fake = forward(gg, self.store, {"gen_in": codes.concat()})[g_out]
        cg = self.critic_graph
        acts = forward(cg.graph, self.store, {"x_real": x_real, "x_fake": x_fake})
        loss_value = float(acts[cg.loss])
        self.last_critic_loss = loss_value
        self.last_wdist = -loss_value
        backward(cg.graph, self.store, acts, cg.loss)
        names = self.critic.critic_path_names()
        if self.spec.sigma > 0.0:
            # Each per-sample gradient carries one N(0, (sigma c_p)^2) draw;
            # summing the batch is one draw of std sigma c_p sqrt(m), applied
            # here on the sqrt(m)-scaled mean gradient and rescaled back.
            root_m = float(np.sqrt(cfg.batch))
            for n in names:
                self.store.grads[n] *= root_m
            privacy.perturb_gradient(self.store, self.spec.sigma, self.spec.c_p,
                                     self.noise_rng, names)
            for n in names:
                self.store.grads[n] /= root_m
        self.opt_critic.update(self.store, self.store.grads, names)
        privacy.clip_weights(self.store, self.spec.c_p, names)

    def generator_step(self) -> tuple[float, float]:
        """One generator/recovery update; returns (gen loss, recovery bound)."""
        cfg = self.config
        codes = sample_codes(cfg.latent, cfg.batch, self.codes_rng)
        inputs = {"gen_in": codes.concat()}
        for i, oh in enumerate(codes.cat_onehot):
            inputs[f"cat{i}"] = oh
        if codes.cont is not None:
            inputs["cont"] = codes.cont
        sg = self.gen_graph
        acts = forward(sg.graph, self.store, inputs)
        loss_value = float(acts[sg.loss])
        l_i = float(acts[sg.mi.total])
        gen_names = self.gen.param_names()
        backward(sg.graph, self.store, acts, sg.loss)
        gen_grads = {n: self.store.grads[n].copy() for n in gen_names}
        mi_names = [*self.critic.trunk_names(), *self.critic.q_head_names()]
        backward(sg.graph, self.store, acts, sg.mi_loss)
        mi_grads = {n: self.store.grads[n].copy() for n in mi_names}
        self.opt_gen.update(self.store, gen_grads, gen_names)
        self.opt_gen.update(self.store, mi_grads, mi_names)
        privacy.clip_weights(self.store, self.spec.c_p, self.critic.critic_path_names())
        return loss_value, l_i


def derive_seeds(seed: int) -> dict[str, int]:
    """Named child seeds so each randomness consumer owns one stream."""
    state = np.random.SeedSequence(seed).generate_state(4, dtype=np.uint64)
    return {"nets": int(state[0]), "batches": int(state[1]),
            "codes": int(state[2]), "noise": int(state[3])}


def build_trainer(config: TrainConfig, data: Dataset) -> Trainer:
    seeds = derive_seeds(config.seed)
    netcfg = NetConfig(latent=config.latent, data_dim=data.dim,
                       gen_hidden=config.gen_hidden,
                       trunk_hidden=config.trunk_hidden, seed=seeds["nets"])
    gen = build_generator(netcfg)
    critic = build_critic(netcfg)
    store = ParamStore.union(gen.store, critic.store)
    spec = config.resolve_privacy(data.n)
    return Trainer(
        config=config, gen=gen, critic=critic, spec=spec, store=store,
        opt_critic=RMSProp(config.lr_critic), opt_gen=RMSProp(config.lr_gen),
        codes_rng=np.random.default_rng(seeds["codes"]),
        noise_rng=np.random.default_rng(seeds["noise"]),
        critic_graph=_build_critic_graph(critic, config.batch),
        gen_graph=_build_gen_graph(gen, critic, config.latent, config.batch,
                                   config.lambda_cat, config.lambda_cont))


@dataclass
class TrainResult:
    gen: GeneratorNet
    critic: CriticQNet
    log: MetricsLog
    privacy: PrivacySpec
    wall_seconds: float


def train(config: TrainConfig, data: Dataset, on_iteration=None) -> TrainResult:
    """Run the full loop; one metrics record per generator iteration.

    ``on_iteration(i, trainer)`` fires at each generator-iteration
    boundary, after that iteration's updates.
    """
    seeds = derive_seeds(config.seed)
    trainer = build_trainer(config, data)
    batches = batch_iter(data, config.batch, seeds["batches"])
    accountant = None
    if trainer.spec.private:
        accountant = AccountantState.create(trainer.spec.q, trainer.spec.sigma)
    log = MetricsLog()
    t_start = time.perf_counter()
    for i in range(1, config.n_g + 1):
        t0 = time.perf_counter()
        try:
            for _ in range(config.n_d):
                trainer.critic_step(next(batches))
            gen_loss, l_i = trainer.generator_step()
        except Exception as exc:
            raise RuntimeError(f"training failed at generator iteration {i}") from exc
        if accountant is not None:
            accountant = accumulate(accountant, config.n_d)
            eps = spent_epsilon(accountant, config.delta)
        else:
            eps = privacy.INF
        log.append(MetricsRecord(
            iteration=i, critic_loss=trainer.last_critic_loss, gen_loss=gen_loss,
            wdist=trainer.last_wdist, l_i=l_i, eps_spent=eps,
            wall_ms=(time.perf_counter() - t0) * 1e3))
        if on_iteration is not None:
            on_iteration(i, trainer)
    return TrainResult(gen=trainer.gen, critic=trainer.critic, log=log,
                       privacy=trainer.spec,
                       wall_seconds=time.perf_counter() - t_start)
