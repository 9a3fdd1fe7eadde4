"""Training loop: two-phase recipe with freezing, differential rates and SGDR."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .corpus import BatchPlan, batchify
from .evaluate import perplexity
from .model import LstmLanguageModel, detach_state, sample_masks
from .optim import AsgdAverager, GroupOptimizer, NtAsgdMonitor
from .schedule import GroupLrPolicy, SgdrClock, effective_group_lrs, sgdr_lr, unfreeze_next

log = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    phase: int
    epoch: int
    lr: float
    train_loss: float
    valid_ppl: float

    def line(self) -> str:
        return (f"phase={self.phase} epoch={self.epoch} lr={self.lr:.6g} "
                f"train_loss={self.train_loss:.6f} valid_ppl={self.valid_ppl:.4f}")


class Trainer:
    """Owns a model, its optimizer, the RNG and the group policy."""

    def __init__(self, model: LstmLanguageModel, config: RunConfig, rng: np.random.Generator | None = None):
        self.model = model
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        params = dict(model.named_parameters())
        self.group_names = model.layer_groups()
        self.optimizer = GroupOptimizer(
            [[params[n] for n in names] for names in self.group_names],
            mode="adam" if config.optimizer == "adam" else "sgd",
            weight_decay=config.weight_decay, clip=config.clip)
        self.policy = GroupLrPolicy.output_only([config.phase1_lr] * len(self.group_names))
        self.state = model.init_state(config.batch_size)
        self.monitor = NtAsgdMonitor(config.nonmono)
        self.averager = AsgdAverager()

    # -- single steps ----------------------------------------------------------------

    def _update(self, inputs, targets, group_lrs) -> float:
        if self.state.h[0].shape[0] != inputs.shape[1]:
            self.state = self.model.init_state(inputs.shape[1])
        masks = sample_masks(self.model.config, inputs.shape[1], self.rng, dtype=self.model.dtype)
        self.model.zero_grad()
        loss, new_state = self.model.loss(inputs, targets, self.state, masks, training=True)
        ad.backward(loss)
        self.optimizer.step(group_lrs, self.policy.frozen)
        self.state = detach_state(new_state)
        if self.averager.started:
            self.averager.update(self.model.get_weights())
        return float(loss.data)

    def train_step(self, batch, lr: float) -> float:
        """One update with every unfrozen group at ``lr`` (used by the LR finder)."""
        inputs, targets = batch
        lrs = [0.0 if fz else lr for fz in self.policy.frozen]
        return self._update(inputs, targets, lrs)

    def snapshot(self):
        return (self.model.get_weights(), self.optimizer.state_dict(), self.state.copy(),
                self.rng.bit_generator.state)

    def restore(self, snap):
        weights, opt, state, rng_state = snap
        self.model.set_weights(weights)
        self.optimizer.load_state_dict(opt)
        self.state = state.copy()
        self.rng.bit_generator.state = rng_state

    # -- epochs ------------------------------------------------------------------------

    def run_epoch(self, plan: BatchPlan) -> tuple[float, float]:
        """Train once over ``plan``; returns (mean loss, lr at epoch start).

        The hidden state restarts from zeros and the SGDR clock restarts at
        the epoch boundary.
        """
        cfg = self.config
        self.state = self.model.init_state(plan.batch_size)
        base_max = max(self.policy.base_lrs)
        horizon = max(plan.n_steps - 1, 1)
        losses, weights, first_lr = [], [], None
        for start, inputs, targets in plan.segments(self.rng, cfg.variable_bptt):
            if cfg.sgdr:
                clock = SgdrClock(horizon, start, base_max, base_max * cfg.sgdr_min_ratio)
                sched = sgdr_lr(clock)
            else:
                sched = base_max
            first_lr = sched if first_lr is None else first_lr
            group_lrs = effective_group_lrs(self.policy, sched, base_max)
            losses.append(self._update(inputs, targets, group_lrs))
            weights.append(inputs.size)
        mean = float(np.average(losses, weights=weights)) if losses else math.nan
        return mean, first_lr if first_lr is not None else base_max

    def layout_perplexity(self, plan: BatchPlan) -> float:
        """Dropout-free perplexity over ``plan`` with the training layout:
        fixed-length windows, state carried down each column from zeros."""
        state = self.model.init_state(plan.batch_size)
        total, count = 0.0, 0
        with ad.no_grad():
            for _, inputs, targets in plan.segments(variable=False):
                logits, state = self.model.forward_segment(inputs, state)
                logp = ad.log_softmax(logits.data)
                flat = targets.reshape(-1)
                total -= float(logp[np.arange(flat.size), flat].sum())
                count += flat.size
        return math.exp(total / count)

    def _with_eval_weights(self, fn):
        if self.averager.mean is None:
            return fn()
        raw = self.model.get_weights()
        self.model.set_weights(self.averager.average())
        try:
            return fn()
        finally:
            self.model.set_weights(raw)

    def evaluate(self, stream) -> float:
        return self._with_eval_weights(lambda: perplexity(self.model, stream).perplexity)

    def current_weights(self) -> list[np.ndarray]:
        """Weights used for evaluation: the ASGD average once it exists."""
        if self.averager.mean is not None:
            return self.averager.average()
        return self.model.get_weights()

    def fit(self, train_stream, valid_stream=None,
            on_epoch: Callable[[EpochRecord], None] | None = None,
            stop_ppl: float | None = None) -> list[EpochRecord]:
        """Phase 1 trains the output group only; phase 2 unfreezes and uses
        the per-group rates. The best-validation weights are restored at the end.

        Without ``valid_stream`` the per-epoch perplexity is measured on the
        training data itself (see :meth:`layout_perplexity`). Training ends
        early once that perplexity drops below ``stop_ppl``.
        """
        cfg = self.config
        plan = batchify(train_stream, cfg.batch_size, cfg.bptt)
        history: list[EpochRecord] = []
        best_ppl, best_weights = math.inf, None
        schedule = [(1, k) for k in range(cfg.phase1_epochs)] + [(2, k) for k in range(cfg.phase2_epochs)]
        for phase, k in schedule:
            if phase == 1 and k == 0:
                self.policy = GroupLrPolicy.output_only([cfg.phase1_lr] * len(self.group_names))
            elif phase == 2:
                if cfg.unfreeze == "all":
                    self.policy = GroupLrPolicy.all_unfrozen(cfg.group_lrs)
                else:
                    self.policy = self.policy.with_base_lrs(cfg.group_lrs)
                    if any(self.policy.frozen):
                        self.policy = unfreeze_next(self.policy)
            train_loss, lr = self.run_epoch(plan)
            if valid_stream is not None:
                valid_ppl = self.evaluate(valid_stream)
            else:
                valid_ppl = self._with_eval_weights(lambda: self.layout_perplexity(plan))
            if cfg.optimizer == "asgd" and not self.averager.started:
                if self.monitor.observe(math.log(valid_ppl)):
                    log.info("NT-ASGD triggered after epoch %d", len(history) + 1)
                    self.averager.start()
            rec = EpochRecord(phase, k + 1, lr, train_loss, valid_ppl)
            history.append(rec)
            log.info(rec.line())
            if on_epoch is not None:
                on_epoch(rec)
            if valid_ppl < best_ppl:
                best_ppl, best_weights = valid_ppl, self.current_weights()
                if cfg.checkpoint_path:
                    self._save(best_weights)
            if stop_ppl is not None and valid_ppl < stop_ppl:
                break
        if best_weights is not None:
            self.model.set_weights(best_weights)
        return history

    def _save(self, weights):
        raw = self.model.get_weights()
        self.model.set_weights(weights)
        self.model.save(self.config.checkpoint_path)
        self.model.set_weights(raw)


def train_language_model(train_stream, valid_stream, vocab_size: int, config: RunConfig,
                         on_epoch=None, stop_ppl: float | None = None
                         ) -> tuple[LstmLanguageModel, list[EpochRecord]]:
    model = LstmLanguageModel(config.model_config(vocab_size), seed=config.seed)
    trainer = Trainer(model, config)
    history = trainer.fit(train_stream, valid_stream, on_epoch, stop_ppl)
    return model, history
