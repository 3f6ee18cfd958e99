"""Variant-comparison harness: train and score each architecture arm over
several seeds and tabulate mean and spread of the resulting mAP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import NetConfig
from .evaluate import evaluate
from .train import train

# (variant, alpha-override) arms, in presentation order
DEFAULT_ARMS = (
    ("baseline", None),
    ("G", None),
    ("GS", 0.0),
    ("GS", 0.1),
    ("GS", 1.0),
    ("GS_parallel", 0.1),
)


@dataclass
class ArmResult:
    variant: str
    alpha: float
    maps: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def mean(self):
        return float(np.mean(self.maps)) if self.maps else float("nan")

    @property
    def sd(self):
        if len(self.maps) < 2:
            return 0.0
        return float(np.std(self.maps, ddof=1))

    @property
    def label(self):
        if self.variant in ("baseline", "G"):
            return self.variant
        suffix = " parallel" if self.variant == "GS_parallel" else ""
        return f"{self.variant.replace('_parallel', '')}{suffix} (alpha={self.alpha:g})"


def ablate(base_cfg: NetConfig, train_samples, eval_samples, seeds=5,
           arms=DEFAULT_ARMS, progress=None):
    """Run every arm for ``seeds`` seeds (base seed, base+1, ...).

    A failed run is recorded in the arm's ``errors`` and does not stop the
    other runs; means are taken over the runs that finished.
    """
    results = []
    for variant, alpha in arms:
        arm = ArmResult(variant=variant,
                        alpha=base_cfg.alpha if alpha is None else alpha)
        for k in range(seeds):
            seed = base_cfg.seed + k
            cfg = base_cfg.replace(variant=variant, alpha=arm.alpha, seed=seed)
            if progress:
                progress(f"[{arm.label}] seed {seed} ...")
            try:
                outcome = train(cfg, train_samples)
                report = evaluate(outcome.net, eval_samples)
                arm.maps.append(report.mean_ap)
                arm.seeds.append(seed)
                if progress:
                    progress(f"[{arm.label}] seed {seed}: mAP {report.mean_ap:.4f}")
            except Exception as e:  # keep the grid alive; record the failure
                arm.errors.append(f"seed {seed}: {type(e).__name__}: {e}")
                if progress:
                    progress(f"[{arm.label}] seed {seed} FAILED: {e}")
        results.append(arm)
    return results


def format_table(results):
    lines = [f"{'arm':<28} {'mean mAP':>9} {'sd':>7}  per-seed",
             "-" * 72]
    for arm in results:
        per_seed = " ".join(f"{m:.3f}" for m in arm.maps) or "-"
        lines.append(f"{arm.label:<28} {arm.mean:>9.4f} {arm.sd:>7.4f}  {per_seed}")
        for err in arm.errors:
            lines.append(f"{'':<28} ERROR {err}")
    return "\n".join(lines)


def results_to_dict(results):
    return [{"variant": a.variant, "alpha": a.alpha, "label": a.label,
             "maps": a.maps, "seeds": a.seeds, "mean": a.mean, "sd": a.sd,
             "errors": a.errors} for a in results]
