"""Pipeline front-end: one JSON config, subcommand per stage, manifests per run.

Stages run in a fixed order (ingest, train-gnn, explain-paths,
retrieve-nodes, prune, build-prompts, export-raft, generate, eval) and
``all`` chains them.  Every stage writes its outputs plus a manifest into
the run directory; a stage whose outputs already exist is skipped unless
--force is given, so interrupted pipelines resume where they stopped.

Determinism: one global seed fans out to per-stage seeds by hashing the
stage name, so changing one stage's internals never shifts another's
randomness.  Two runs with the same config and seed produce bitwise
identical artifacts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .curation import (
    PromptSample,
    TrainingSample,
    build_prompt,
    compute_reliance,
    export_raft,
    prune_dataset,
)
from .gateway import (
    EndpointConfig,
    EndpointTextEmbedder,
    GatewayClient,
    GenerationSettings,
)
from .gnn import GnnConfig, LpTrainConfig, load_checkpoint, save_checkpoint, train_lp
from .graphstore import GraphError, NodeRef, ingest_dataset, item, user
from .harness import (
    FAILURES_FILE,
    GENERATIONS_FILE,
    METRICS_FILE,
    NODE_EMBEDDINGS_FILE,
    PATHS_FILE,
    PROMPTS_FILE,
    PRUNED_FILE,
    RAFT_FILE,
    REPORT_FILE,
    RETRIEVAL_FILE,
    RUN_CONFIG_FILE,
    CHECKPOINT_FILE,
    evaluate_run,
)
from .pathexplain import MaskLearnConfig, explain, write_explanations
from .retrieval import (
    EmbeddingStore,
    HashingTextEmbedder,
    load_embeddings,
    retrieve,
    store_from_profiles,
    write_embedding_file,
)

GRAPH_SUMMARY_FILE = "graph_summary.json"


class ConfigError(ValueError):
    """Invalid run configuration; message lists every offending field."""


# ---------------------------------------------------------------------------
# configuration


_DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "m": 2,
    "hops": 2,
    "k": 2,
    "max_path_len": 5,
    "t": 0.7,
    "gnn": {"encoder": "rgcn", "dim": 128, "layers": 2},
    "lp_train": {
        "steps": 200, "lr": 0.05, "optimizer": "adam",
        "negatives_per_positive": 1, "holdout_fraction": 0.1,
    },
    "mask": {
        "steps": 200, "lr": 0.1, "optimizer": "adam",
        "refresh_interval": 10, "exclude_center_edge": True,
    },
    "embedding": {"source": "hash", "dim": 128, "file": None},
    "endpoint": None,
    "generation": {"temperature": 0.0, "max_output_tokens": 256},
}


def _merge_defaults(raw: dict, defaults: dict) -> dict:
    out = dict(defaults)
    for key, value in raw.items():
        if key in defaults and isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge_defaults(value, defaults[key])
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    """Resolved configuration for one run; built from a JSON document."""

    data: dict

    @classmethod
    def load(cls, path: str | Path, out_dir: str | None = None,
             seed: int | None = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err.msg})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        data = _merge_defaults(raw, _DEFAULTS)
        if out_dir is not None:
            data["out_dir"] = out_dir
        if seed is not None:
            data["seed"] = seed
        cfg = cls(data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        errors: list[str] = []
        d = self.data

        dataset = d.get("dataset")
        if not isinstance(dataset, dict):
            errors.append("dataset: missing section with users/items/interactions paths")
            dataset = {}
        for key in ("users", "items", "interactions"):
            value = dataset.get(key)
            if not value:
                errors.append(f"dataset.{key}: required path is missing")
            elif not Path(value).exists():
                errors.append(f"dataset.{key}: no such file: {value}")
        for key in ("explanations_train", "explanations_test", "labels"):
            value = dataset.get(key)
            if value and not Path(value).exists():
                errors.append(f"dataset.{key}: no such file: {value}")

        if not d.get("out_dir"):
            errors.append("out_dir: required")
        if not isinstance(d.get("seed"), int):
            errors.append("seed: must be an integer")
        if not isinstance(d.get("workers"), int) or d["workers"] < 1:
            errors.append("workers: must be an integer >= 1")
        for key, low in (("m", 0), ("hops", 1), ("k", 1), ("max_path_len", 1)):
            if not isinstance(d.get(key), int) or d[key] < low:
                errors.append(f"{key}: must be an integer >= {low}")
        if not isinstance(d.get("t"), (int, float)) or not 0.0 <= d["t"] < 1.0:
            errors.append("t: must lie in [0, 1)")

        gnn = d.get("gnn", {})
        if gnn.get("encoder") not in ("rgcn", "lightgcn"):
            errors.append("gnn.encoder: must be \"rgcn\" or \"lightgcn\"")
        for key in ("dim", "layers"):
            if not isinstance(gnn.get(key), int) or gnn[key] < 1:
                errors.append(f"gnn.{key}: must be an integer >= 1")

        lp = d.get("lp_train", {})
        if not isinstance(lp.get("steps"), int) or lp["steps"] < 1:
            errors.append("lp_train.steps: must be an integer >= 1")
        if not isinstance(lp.get("lr"), (int, float)) or lp["lr"] <= 0:
            errors.append("lp_train.lr: must be positive")
        if not isinstance(lp.get("holdout_fraction"), (int, float)) or \
                not 0.0 <= lp["holdout_fraction"] < 1.0:
            errors.append("lp_train.holdout_fraction: must lie in [0, 1)")

        mask = d.get("mask", {})
        if not isinstance(mask.get("steps"), int) or mask["steps"] < 1:
            errors.append("mask.steps: must be an integer >= 1")
        if not isinstance(mask.get("lr"), (int, float)) or mask["lr"] <= 0:
            errors.append("mask.lr: must be positive")
        if not isinstance(mask.get("refresh_interval"), int) or mask["refresh_interval"] < 1:
            errors.append("mask.refresh_interval: must be an integer >= 1")

        emb = d.get("embedding", {})
        source = emb.get("source")
        if source not in ("hash", "file", "endpoint"):
            errors.append("embedding.source: must be \"hash\", \"file\" or \"endpoint\"")
        if source == "file":
            if not emb.get("file"):
                errors.append("embedding.file: required when source is \"file\"")
            elif not Path(emb["file"]).exists():
                errors.append(f"embedding.file: no such file: {emb['file']}")
        if source == "hash" and (not isinstance(emb.get("dim"), int) or emb["dim"] < 1):
            errors.append("embedding.dim: must be an integer >= 1")
        if source == "endpoint" and not d.get("endpoint"):
            errors.append("endpoint: required when embedding.source is \"endpoint\"")

        endpoint = d.get("endpoint")
        if endpoint is not None:
            if not isinstance(endpoint, dict):
                errors.append("endpoint: must be an object")
            else:
                for key in ("base_url", "model"):
                    if not endpoint.get(key):
                        errors.append(f"endpoint.{key}: required")

        gen = d.get("generation", {})
        if not isinstance(gen.get("temperature"), (int, float)) or gen["temperature"] < 0:
            errors.append("generation.temperature: must be >= 0")
        if not isinstance(gen.get("max_output_tokens"), int) or gen["max_output_tokens"] < 1:
            errors.append("generation.max_output_tokens: must be an integer >= 1")

        if errors:
            raise ConfigError(
                "invalid configuration:\n" + "\n".join(f"  - {e}" for e in errors)
            )

    # -- derived views ---------------------------------------------------

    @property
    def out_dir(self) -> Path:
        return Path(self.data["out_dir"])

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def stage_seed(self, stage: str) -> int:
        digest = hashlib.sha256(f"{self.seed}:{stage}".encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big") % (2**31)

    def config_hash(self) -> str:
        hashable = {k: v for k, v in self.data.items() if k != "out_dir"}
        blob = json.dumps(hashable, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def gnn_config(self, seed: int) -> GnnConfig:
        g = self.data["gnn"]
        return GnnConfig(encoder=g["encoder"], dim=g["dim"], layers=g["layers"], seed=seed)

    def lp_config(self, seed: int) -> LpTrainConfig:
        lp = self.data["lp_train"]
        return LpTrainConfig(
            steps=lp["steps"], lr=lp["lr"], optimizer=lp["optimizer"],
            negatives_per_positive=lp["negatives_per_positive"],
            holdout_fraction=lp["holdout_fraction"], seed=seed,
        )

    def mask_config(self, seed: int) -> MaskLearnConfig:
        m = self.data["mask"]
        return MaskLearnConfig(
            steps=m["steps"], lr=m["lr"], optimizer=m["optimizer"],
            refresh_interval=m["refresh_interval"],
            max_path_len=self.data["max_path_len"], k=self.data["k"],
            exclude_center_edge=m["exclude_center_edge"], seed=seed,
        )

    def endpoint_config(self) -> EndpointConfig | None:
        ep = self.data.get("endpoint")
        if ep is None:
            return None
        return EndpointConfig(
            base_url=ep["base_url"],
            model=ep["model"],
            embed_model=ep.get("embed_model"),
            auth_env=ep.get("auth_env"),
            system_message=ep.get("system_message"),
            timeout=ep.get("timeout", 30.0),
            max_retries=ep.get("max_retries", 3),
            max_concurrency=ep.get("max_concurrency", 4),
        )

    def generation_settings(self) -> GenerationSettings:
        gen = self.data["generation"]
        return GenerationSettings(
            temperature=gen["temperature"],
            max_output_tokens=gen["max_output_tokens"],
        )


# ---------------------------------------------------------------------------
# shared stage plumbing


@dataclass
class StageContext:
    cfg: RunConfig
    force: bool = False
    transport: object | None = None

    def load_graph(self):
        ds = self.cfg.data["dataset"]
        return ingest_dataset(
            ds["users"], ds["items"], ds["interactions"],
            ds.get("explanations_train"), ds.get("explanations_test"),
        )

    def explanation_pairs(self, graph, store) -> list[tuple[NodeRef, NodeRef]]:
        """Pairs to explain/retrieve: explanation pairs if any, else all edges."""
        pairs = {(u, i) for u, i, _ in store.train} | {(u, i) for u, i, _ in store.test}
        if not pairs:
            pairs = {(user(u), item(i)) for u, i in graph.edges()}
        return sorted(pairs, key=lambda p: (p[0].index, p[1].index))

    def node_store(self, graph, run_dir: Path) -> EmbeddingStore:
        emb = self.cfg.data["embedding"]
        if emb["source"] == "file":
            return load_embeddings(emb["file"], graph)
        if emb["source"] == "hash":
            return store_from_profiles(graph, HashingTextEmbedder(emb["dim"]))
        client = GatewayClient(self.cfg.endpoint_config(), transport=self.transport)
        embedder = EndpointTextEmbedder(client, cache_path=run_dir / "text_cache.jsonl")
        return store_from_profiles(graph, embedder)

    def text_embedder(self, run_dir: Path):
        emb = self.cfg.data["embedding"]
        if emb["source"] == "endpoint":
            client = GatewayClient(self.cfg.endpoint_config(), transport=self.transport)
            return EndpointTextEmbedder(client, cache_path=run_dir / "text_cache.jsonl")
        # file-based node embeddings cannot embed free text; hash instead
        return HashingTextEmbedder(emb.get("dim") or 128)


def _prepare_run_dir(cfg: RunConfig) -> Path:
    run_dir = cfg.out_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    config_path = run_dir / RUN_CONFIG_FILE
    echo = {k: v for k, v in cfg.data.items() if k != "out_dir"}
    echo["config_hash"] = cfg.config_hash()
    blob = json.dumps(echo, indent=2, sort_keys=True) + "\n"
    if config_path.exists():
        previous = json.loads(config_path.read_text(encoding="utf-8"))
        if previous.get("config_hash") != echo["config_hash"]:
            raise ConfigError(
                f"{run_dir} was produced with a different configuration; "
                "use a fresh output directory"
            )
    else:
        config_path.write_text(blob, encoding="utf-8")
    return run_dir


def _write_manifest(run_dir: Path, stage: str, cfg: RunConfig, status: str,
                    outputs: list[str], started: float, stats: dict) -> None:
    manifest = {
        "stage": stage,
        "status": status,
        "config_hash": cfg.config_hash(),
        "seed": cfg.stage_seed(stage),
        "outputs": outputs,
        "versions": {
            "package": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        "started_at": started,
        "elapsed_seconds": time.time() - started,
        "stats": stats,
    }
    path = run_dir / f"manifest_{stage}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _outputs_exist(run_dir: Path, outputs: list[str]) -> bool:
    return bool(outputs) and all((run_dir / name).exists() for name in outputs)


# ---------------------------------------------------------------------------
# stages


def stage_ingest(ctx: StageContext, run_dir: Path) -> tuple[list[str], dict]:
    graph, store = ctx.load_graph()
    summary = {
        "users": graph.user_count,
        "items": graph.item_count,
        "interactions": graph.edge_count,
        "explanations_train": len(store.train),
        "explanations_test": len(store.test),
        "mapping_hash": graph.mapping_hash(),
    }
    (run_dir / GRAPH_SUMMARY_FILE).write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return [GRAPH_SUMMARY_FILE], summary


def stage_train_gnn(ctx: StageContext, run_dir: Path) -> tuple[list[str], dict]:
    graph, _ = ctx.load_graph()
    seed = ctx.cfg.stage_seed("train-gnn")
    model, report = train_lp(graph, ctx.cfg.gnn_config(seed), ctx.cfg.lp_config(seed))
    save_checkpoint(model, run_dir / CHECKPOINT_FILE)
    metrics = {
        "final_loss": report.losses[-1],
        "steps": len(report.losses),
        "holdout_auc": report.holdout_auc,
        "holdout_edges": len(report.holdout_edges),
    }
    (run_dir / METRICS_FILE).write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return [CHECKPOINT_FILE, METRICS_FILE], metrics


def stage_explain_paths(ctx: StageContext, run_dir: Path) -> tuple[list[str], dict]:
    graph, store = ctx.load_graph()
    checkpoint = run_dir / CHECKPOINT_FILE
    if not checkpoint.exists():
        raise GraphError(f"missing {CHECKPOINT_FILE}; run train-gnn first")
    model = load_checkpoint(checkpoint, graph)
    cfg = ctx.cfg
    mask_cfg = cfg.mask_config(cfg.stage_seed("explain-paths"))
    pairs = ctx.explanation_pairs(graph, store)

    def one(pair):
        return explain(graph, model, pair, cfg.data["m"], cfg.data["hops"], mask_cfg)

    if cfg.data["workers"] > 1:
        with ThreadPoolExecutor(max_workers=cfg.data["workers"]) as pool:
            explanations = list(pool.map(one, pairs))
    else:
        explanations = [one(p) for p in pairs]
    write_explanations(run_dir / PATHS_FILE, graph, explanations)
    n_with_paths = sum(1 for e in explanations if e.paths)
    return [PATHS_FILE], {
        "pairs": len(pairs),
        "pairs_with_paths": n_with_paths,
    }


def stage_retrieve_nodes(ctx: StageContext, run_dir: Path) -> tuple[list[str], dict]:
    graph, store = ctx.load_graph()
    emb_store = ctx.node_store(graph, run_dir)
    write_embedding_file(
        run_dir / NODE_EMBEDDINGS_FILE, emb_store.dim,
        ((graph.node_id(ref), ref.kind.value, emb_store.vector(ref))
         for ref in graph.all_nodes()),
    )
    pairs = ctx.explanation_pairs(graph, store)
    k = ctx.cfg.data["k"]
    with (run_dir / RETRIEVAL_FILE).open("w", encoding="utf-8") as fh:
        for pair in pairs:
            result = retrieve(graph, emb_store, pair, k)
            fh.write(json.dumps({
                "user": graph.node_id(pair[0]),
                "item": graph.node_id(pair[1]),
                "users": [[graph.node_id(r), s] for r, s in result.users],
                "items": [[graph.node_id(r), s] for r, s in result.items],
            }, sort_keys=True) + "\n")
    return [NODE_EMBEDDINGS_FILE, RETRIEVAL_FILE], {
        "pairs": len(pairs), "embedding_source": emb_store.source,
    }


def stage_prune(ctx: StageContext, run_dir: Path) -> tuple[list[str], dict]:
    graph, store = ctx.load_graph()
    if not store.train:
        raise GraphError("prune needs a training explanation file")
    samples = [TrainingSample(u, i, text) for u, i, text in store.train]
    compute_reliance(graph, samples, ctx.text_embedder(run_dir))
    pruned = prune_dataset(samples, ctx.cfg.data["t"])
    with (run_dir / PRUNED_FILE).open("w", encoding="utf-8") as fh:
        for s in pruned:
            fh.write(json.dumps({
                "user": graph.node_id(s.user),
                "item": graph.node_id(s.item),
                "reliance": s.reliance,
                "explanation": s.explanation,
            }, sort_keys=True) + "\n")
    return [PRUNED_FILE], {"total": len(samples), "kept": len(pruned)}


def _load_pair_index(graph):
    users = {graph.node_id(user(k)): user(k) for k in range(graph.user_count)}
    items = {graph.node_id(item(k)): item(k) for k in range(graph.item_count)}
    return users, items


def _read_jsonl(path: Path) -> list[dict]:
    records = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def stage_build_prompts(ctx: StageContext, run_dir: Path) -> tuple[list[str], dict]:
    from .retrieval import RetrievalResult

    graph, store = ctx.load_graph()
    for name in (PATHS_FILE, RETRIEVAL_FILE):
        if not (run_dir / name).exists():
            raise GraphError(f"missing {name}; run the earlier stages first")
    users_by_id, items_by_id = _load_pair_index(graph)

    def ref_of(node_id: str) -> NodeRef:
        if node_id in users_by_id:
            return users_by_id[node_id]
        if node_id in items_by_id:
            return items_by_id[node_id]
        raise GraphError(f"dump references unknown node id {node_id!r}")

    paths_by_pair = {
        (r["user"], r["item"]): r for r in _read_jsonl(run_dir / PATHS_FILE)
    }
    retrieval_by_pair = {
        (r["user"], r["item"]): r for r in _read_jsonl(run_dir / RETRIEVAL_FILE)
    }
    targets = {(graph.node_id(u), graph.node_id(i)): text for u, i, text in store.train}
    targets.update({(graph.node_id(u), graph.node_id(i)): text for u, i, text in store.test})

    pairs = ctx.explanation_pairs(graph, store)
    count = 0
    with (run_dir / PROMPTS_FILE).open("w", encoding="utf-8") as fh:
        for pair in pairs:
            key = (graph.node_id(pair[0]), graph.node_id(pair[1]))
            path_rec = paths_by_pair.get(key, {"paths": []})
            ret_rec = retrieval_by_pair.get(key)
            if ret_rec is None:
                raise GraphError(f"no retrieval record for pair {key}")
            result = RetrievalResult(
                user=pair[0], item=pair[1],
                users=tuple((ref_of(nid), float(sim)) for nid, sim in ret_rec["users"]),
                items=tuple((ref_of(nid), float(sim)) for nid, sim in ret_rec["items"]),
            )
            node_paths = [
                [ref_of(nid) for nid in p["nodes"]] for p in path_rec["paths"]
            ]
            sample = build_prompt(graph, pair, result, node_paths,
                                  target=targets.get(key))
            fh.write(json.dumps({
                "user": key[0],
                "item": key[1],
                "prompt": sample.prompt,
                "target": sample.target,
                "provenance": sample.provenance,
            }, sort_keys=True) + "\n")
            count += 1
    return [PROMPTS_FILE], {"prompts": count}


def stage_export_raft(ctx: StageContext, run_dir: Path) -> tuple[list[str], dict]:
    graph, _ = ctx.load_graph()
    for name in (PRUNED_FILE, PROMPTS_FILE):
        if not (run_dir / name).exists():
            raise GraphError(f"missing {name}; run the earlier stages first")
    users_by_id, items_by_id = _load_pair_index(graph)
    pruned = []
    for rec in _read_jsonl(run_dir / PRUNED_FILE):
        sample = TrainingSample(
            users_by_id[rec["user"]], items_by_id[rec["item"]],
            rec["explanation"], reliance=rec["reliance"],
        )
        pruned.append(sample)
    prompts = {}
    for rec in _read_jsonl(run_dir / PROMPTS_FILE):
        prompts[(rec["user"], rec["item"])] = PromptSample(
            prompt=rec["prompt"], target=rec["target"], provenance=rec["provenance"],
        )
    count = export_raft(pruned, prompts, graph, run_dir / RAFT_FILE)
    return [RAFT_FILE, f"{RAFT_FILE}.manifest.json"], {"records": count}


def stage_generate(ctx: StageContext, run_dir: Path) -> tuple[list[str], dict]:
    endpoint = ctx.cfg.endpoint_config()
    if endpoint is None:
        return [], {"note": "no endpoint configured; generation skipped"}
    graph, store = ctx.load_graph()
    if not (run_dir / PROMPTS_FILE).exists():
        raise GraphError(f"missing {PROMPTS_FILE}; run build-prompts first")
    test_keys = {(graph.node_id(u), graph.node_id(i)) for u, i, _ in store.test}
    samples = []
    for rec in _read_jsonl(run_dir / PROMPTS_FILE):
        if not test_keys or (rec["user"], rec["item"]) in test_keys:
            samples.append(PromptSample(
                prompt=rec["prompt"], target=rec["target"],
                provenance=rec["provenance"],
            ))
    if not samples:
        raise GraphError("no prompts to generate for")
    client = GatewayClient(endpoint, transport=ctx.transport,
                           jitter_seed=ctx.cfg.stage_seed("generate"))
    with client:
        stats = client.batch_generate(
            samples, run_dir / GENERATIONS_FILE, run_dir / FAILURES_FILE,
            ctx.cfg.generation_settings(),
        )
    stats["requests"] = client.request_count
    stats["retries"] = client.retry_count
    return [GENERATIONS_FILE, FAILURES_FILE], stats


def stage_eval(ctx: StageContext, run_dir: Path) -> tuple[list[str], dict]:
    report = evaluate_run(run_dir)
    stats = {
        "usr": report.usr,
        "lp_auc": report.lp_auc,
        "retrieval_agreement": report.retrieval_agreement,
        "path_precision": report.path_precision,
        "path_recall": report.path_recall,
    }
    return [REPORT_FILE], stats


STAGES = (
    ("ingest", stage_ingest, [GRAPH_SUMMARY_FILE]),
    ("train-gnn", stage_train_gnn, [CHECKPOINT_FILE, METRICS_FILE]),
    ("explain-paths", stage_explain_paths, [PATHS_FILE]),
    ("retrieve-nodes", stage_retrieve_nodes, [NODE_EMBEDDINGS_FILE, RETRIEVAL_FILE]),
    ("prune", stage_prune, [PRUNED_FILE]),
    ("build-prompts", stage_build_prompts, [PROMPTS_FILE]),
    ("export-raft", stage_export_raft, [RAFT_FILE, f"{RAFT_FILE}.manifest.json"]),
    ("generate", stage_generate, [GENERATIONS_FILE]),
    ("eval", stage_eval, [REPORT_FILE]),
)


def run_stage(name: str, ctx: StageContext) -> None:
    stage_fn = None
    outputs_decl: list[str] = []
    for stage_name, fn, outputs in STAGES:
        if stage_name == name:
            stage_fn = fn
            outputs_decl = outputs
    if stage_fn is None:
        raise ConfigError(f"unknown stage {name!r}")
    run_dir = _prepare_run_dir(ctx.cfg)
    started = time.time()
    if not ctx.force and _outputs_exist(run_dir, outputs_decl):
        _write_manifest(run_dir, name, ctx.cfg, "skipped", outputs_decl, started,
                        {"note": "outputs already exist"})
        print(f"[{name}] skipped (outputs exist)")
        return
    outputs, stats = stage_fn(ctx, run_dir)
    status = "ok" if outputs else "skipped"
    _write_manifest(run_dir, name, ctx.cfg, status, outputs, started, stats)
    print(f"[{name}] {status}: " + ", ".join(outputs or ["no outputs"]))


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="whyrec",
        description="Evidence retrieval and prompt curation pipeline for "
                    "explainable recommendation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    names = [name for name, _, _ in STAGES] + ["all"]
    for name in names:
        p = sub.add_parser(name, help=f"run the {name} stage"
                           if name != "all" else "run every stage in order")
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out-dir", default=None, help="override out_dir from config")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--force", action="store_true",
                       help="re-run even if stage outputs already exist")
    return parser


def main(argv=None, transport=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, out_dir=args.out_dir, seed=args.seed)
    except ConfigError as err:
        print(str(err), file=sys.stderr)
        return 1
    ctx = StageContext(cfg=cfg, force=args.force, transport=transport)
    stage_names = [name for name, _, _ in STAGES] if args.command == "all" \
        else [args.command]
    for name in stage_names:
        try:
            run_stage(name, ctx)
        except (ConfigError, GraphError, ValueError, RuntimeError, OSError) as err:
            print(f"stage {name} failed: {err}", file=sys.stderr)
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
