"""Experiment pipelines: edit vs retrain, periodic editing, concept importance.

Each pipeline repeats its scenario over consecutive seeds and returns a
:class:`RunRecord` whose canonical JSON serialization is a pure function
of the scenario config (wall times are kept on the record but excluded
from the canonical form, so report files diff cleanly across runs).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .editing import ConceptRemoval, DataRemoval, edit
from .errors import CbeditError, ConfigError
from .oracle import evaluate_pair, retrain_after_edit
from .scenario import ScenarioConfig, inject_noise, scenario_hash, synth_dataset
from .training import train_two_stage


@dataclass
class RunRecord:
    scenario: str
    kind: str
    config: dict
    per_seed: list[dict]
    summary: dict
    timings: list[dict] = field(default_factory=list)

    def to_json(self, with_timings: bool = False) -> str:
        payload = {
            "scenario": self.scenario,
            "kind": self.kind,
            "config": self.config,
            "per_seed": self.per_seed,
            "summary": self.summary,
        }
        if with_timings:
            payload["timings"] = self.timings
        return json.dumps(payload, sort_keys=True)


def append_record(path: str | Path, record: RunRecord,
                  with_timings: bool = False) -> None:
    """Append one record as a JSON line (the regression-diffable log)."""
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(record.to_json(with_timings) + "\n")


def _mean_sd(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "sd": sd}


def _summarize(per_seed: list[dict], keys: list[str]) -> dict:
    out = {}
    for key in keys:
        head, leaf = key.rsplit(".", 1)
        values = [rec[head][leaf] for rec in per_seed]
        out[key] = _mean_sd(values)
    return out


def run_edit_vs_retrain(config: ScenarioConfig) -> RunRecord:
    """Train on corrupted data, then undo the corruption by edit and by retrain.

    Per repetition: synthesize data, inject the configured noise, train on
    the noisy set, apply the closed-form edit that undoes the corruption,
    and retrain from scratch as ground truth.  Failed repetitions are
    recorded, not raised.
    """
    spec = config.model_spec()
    backend = config.edit_backend()
    per_seed: list[dict] = []
    timings: list[dict] = []
    for rep in range(config.repetitions):
        cfg_r = config.with_seed(config.seed + rep)
        train_D, test_D = synth_dataset(cfg_r)
        noisy_D, undo = inject_noise(train_D, cfg_r.noise_level,
                                     cfg_r.noise_fraction, cfg_r.seed)
        entry: dict = {"seed": cfg_r.seed, "status": "ok"}
        try:
            clean = train_two_stage(train_D, spec, cfg_r.train)
            noisy = train_two_stage(noisy_D, spec, cfg_r.train)
            entry["original"] = evaluate_pair(clean.g, clean.f, test_D)
            entry["noisy"] = evaluate_pair(noisy.g, noisy.f, test_D)

            t0 = time.perf_counter()
            g_e, f_e, report = edit(noisy.g, noisy.f, noisy_D, undo, backend,
                                    label_loss=spec.label_loss)
            edit_seconds = time.perf_counter() - t0

            t1 = time.perf_counter()
            retrained = retrain_after_edit(noisy_D, undo, spec, cfg_r.train)
            retrain_seconds = time.perf_counter() - t1

            eval_test = test_D
            if isinstance(undo, ConceptRemoval):
                eval_test = test_D.without_concepts(list(undo.concepts))
            entry["edited"] = evaluate_pair(g_e, f_e, eval_test)
            entry["retrained"] = evaluate_pair(retrained.g, retrained.f, eval_test)
            timings.append({"seed": cfg_r.seed, "edit_seconds": edit_seconds,
                            "retrain_seconds": retrain_seconds})
        except CbeditError as exc:
            entry["status"] = "failed"
            entry["error"] = str(exc)
        per_seed.append(entry)

    ok = [rec for rec in per_seed if rec["status"] == "ok"]
    summary = _summarize(ok, ["original.macro_f1", "noisy.macro_f1",
                              "edited.macro_f1", "retrained.macro_f1"]) if ok else {}
    summary["failures"] = len(per_seed) - len(ok)
    return RunRecord(scenario_hash(config), "edit_vs_retrain", config.to_dict(),
                     per_seed, summary, timings)


def run_periodic(config: ScenarioConfig, rounds: int,
                 increment: float = 0.01) -> RunRecord:
    """Sequential data removals: each round edits the previous round's model.

    The retraining reference is rebuilt from scratch each round on the
    cumulatively reduced dataset, while the edit path carries the edited
    models forward and rebuilds curvature at their current parameters.
    """
    if rounds < 0:
        raise ConfigError("rounds must be nonnegative")
    if rounds * increment > 0.5:
        raise ConfigError("cumulative removal exceeds the noise budget (50%)")
    spec = config.model_spec()
    backend = config.edit_backend()
    train_D, test_D = synth_dataset(config)
    base = train_two_stage(train_D, spec, config.train)
    base_metrics = evaluate_pair(base.g, base.f, test_D)

    rng = np.random.default_rng([config.seed, 37])
    batch_size = max(1, int(round(increment * train_D.n)))
    g_cur, f_cur, D_cur = base.g, base.f, train_D
    per_round: list[dict] = []
    timings: list[dict] = []
    for rnd in range(rounds):
        rows = np.sort(rng.choice(D_cur.n, size=batch_size, replace=False))
        req = DataRemoval(tuple(int(i) for i in rows))

        t0 = time.perf_counter()
        g_cur, f_cur, _ = edit(g_cur, f_cur, D_cur, req, backend,
                               label_loss=spec.label_loss)
        edit_seconds = time.perf_counter() - t0

        D_cur = D_cur.without_rows(list(req.rows))
        t1 = time.perf_counter()
        retrained = train_two_stage(D_cur, spec, config.train)
        retrain_seconds = time.perf_counter() - t1

        edited_m = evaluate_pair(g_cur, f_cur, test_D)
        retrained_m = evaluate_pair(retrained.g, retrained.f, test_D)
        per_round.append({
            "round": rnd + 1,
            "removed_total": train_D.n - D_cur.n,
            "edited": edited_m,
            "retrained": retrained_m,
            "f1_gap": abs(edited_m["macro_f1"] - retrained_m["macro_f1"]),
        })
        timings.append({"round": rnd + 1, "edit_seconds": edit_seconds,
                        "retrain_seconds": retrain_seconds})

    summary = {
        "base_f1": base_metrics["macro_f1"],
        "max_f1_gap": max((r["f1_gap"] for r in per_round), default=0.0),
        "rounds": rounds,
    }
    return RunRecord(scenario_hash(config), "periodic", config.to_dict(),
                     per_round, summary, timings)


def run_importance(config: ScenarioConfig, top_t: int, bottom_t: int,
                   metric: str = "param-norm") -> RunRecord:
    """Remove the most/least influential concepts by edit and by retrain."""
    from .editing import concept_importance

    if top_t + bottom_t > config.k:
        raise ConfigError("top_t + bottom_t cannot exceed the concept count")
    spec = config.model_spec()
    backend = config.edit_backend()
    per_seed: list[dict] = []
    for rep in range(config.repetitions):
        cfg_r = config.with_seed(config.seed + rep)
        train_D, test_D = synth_dataset(cfg_r)
        base = train_two_stage(train_D, spec, cfg_r.train)
        base_f1 = evaluate_pair(base.g, base.f, test_D)["macro_f1"]
        ranking = concept_importance(base.g, base.f, train_D, backend,
                                     metric=metric, eval_data=test_D,
                                     label_loss=spec.label_loss)
        entry = {"seed": cfg_r.seed, "base_f1": base_f1,
                 "ranking": [[j, s] for j, s in ranking]}
        for tag, count, idx in (("top", top_t, [j for j, _ in ranking[:top_t]]),
                                ("bottom", bottom_t,
                                 [j for j, _ in ranking[-bottom_t:]] if bottom_t else [])):
            if count == 0:
                entry[tag] = {"f1_drop_edit": 0.0, "f1_drop_retrain": 0.0,
                              "concepts": []}
                continue
            req = ConceptRemoval(tuple(sorted(idx)))
            g_e, f_e, _ = edit(base.g, base.f, train_D, req, backend,
                               label_loss=spec.label_loss)
            retrained = retrain_after_edit(train_D, req, spec, cfg_r.train)
            eval_test = test_D.without_concepts(list(req.concepts))
            f1_edit = evaluate_pair(g_e, f_e, eval_test)["macro_f1"]
            f1_retrain = evaluate_pair(retrained.g, retrained.f,
                                       eval_test)["macro_f1"]
            entry[tag] = {"concepts": sorted(idx),
                          "f1_drop_edit": base_f1 - f1_edit,
                          "f1_drop_retrain": base_f1 - f1_retrain,
                          "f1_gap": abs(f1_edit - f1_retrain)}
        per_seed.append(entry)

    summary = {
        "top_drop_edit": _mean_sd([r["top"]["f1_drop_edit"] for r in per_seed]),
        "bottom_drop_edit": _mean_sd([r["bottom"]["f1_drop_edit"]
                                      for r in per_seed]),
        "top_drop_retrain": _mean_sd([r["top"]["f1_drop_retrain"]
                                      for r in per_seed]),
        "bottom_drop_retrain": _mean_sd([r["bottom"]["f1_drop_retrain"]
                                         for r in per_seed]),
    }
    return RunRecord(scenario_hash(config), "importance", config.to_dict(),
                     per_seed, summary)
