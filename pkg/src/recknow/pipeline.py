"""Pipeline stages with on-disk artifacts and provenance guards."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import cf, corpus, kg
from .config import PipelineConfig
from .errors import CacheMiss, NoPositivePairs, StaleUpstream, UpstreamMissing
from .evaluate import BaselineIndices, GroupingSpec, evaluate_run, group_report, rank_baseline
from .knowledge import KnowledgeParams, build_pack, read_packs, select_global_i2i, select_history_i2i, write_packs
from .llm import CompletionConfig, Gateway, RankedList, parse_ranking
from .prompts import DATASET_LEXICON, read_prompts, render_prompt, write_prompts

log = logging.getLogger(__name__)

STAGES = ("prepare", "extract", "knowledge", "render", "rank", "eval")


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class StageResult:
    stage: str
    cached: bool = False
    skipped: int = 0
    outputs: list[str] = field(default_factory=list)


class Run:
    """Artifact layout, provenance records and the six stages for one config."""

    def __init__(self, cfg: PipelineConfig, force: bool = False, gateway_factory: Optional[Callable] = None):
        self.cfg = cfg
        self.force = force
        self.out = cfg.out_dir
        self.gateway_factory = gateway_factory

    # ------------------------------------------------------------ layout
    def path(self, name: str) -> Path:
        return self.out / name

    def prov_path(self, stage: str) -> Path:
        return self.out / "provenance" / f"{stage}.json"

    def stage_name(self, stage: str) -> str:
        if stage == "knowledge":
            return f"knowledge.{self.cfg.knowledge.variant}"
        if stage in ("render", "rank", "eval"):
            return f"{stage}.{self.cfg.run_key}"
        return stage

    def config_hash(self, stage: str) -> str:
        c = self.cfg
        if stage == "prepare":
            return c.section_hash("dataset", "sampling")
        if stage == "extract":
            k = c.knowledge
            extra = json.dumps([k.history_window, k.i2i_k, k.his_i2i_source, c.sampling.seed])
            return hashlib.sha256((c.section_hash("cf", "kg") + extra).encode()).hexdigest()[:16]
        if stage == "knowledge":
            return c.section_hash("knowledge")
        if stage == "render":
            return c.section_hash("knowledge", "prompt") + ":" + self.lexicon
        if stage == "rank":
            return c.section_hash("gateway")
        return c.section_hash("eval")

    @property
    def lexicon(self) -> str:
        return self.cfg.dataset.lexicon or DATASET_LEXICON.get(self.cfg.dataset.format, "product")

    def outputs_of(self, stage: str) -> list[str]:
        key = self.cfg.run_key
        if stage == "prepare":
            return ["split.jsonl", "tasks.jsonl", "catalog.jsonl", "dataset_stats.json"]
        if stage == "extract":
            return ["stats_pairs.tsv", "stats_freq.tsv", "emb_users.txt", "emb_items.txt",
                    "links.tsv", "graph_edges.tsv", "paths.jsonl"]
        if stage == "knowledge":
            return [f"knowledge.{self.cfg.knowledge.variant}.jsonl"]
        if stage == "render":
            return [f"prompts.{key}.jsonl"]
        if stage == "rank":
            return [f"responses.{key}.jsonl", f"rankings.{key}.jsonl"]
        return [f"report.{key}.json", f"report.{key}.txt", f"report.{key}.tsv"]

    # -------------------------------------------------------- provenance
    def _load_prov(self, stage: str) -> Optional[dict]:
        p = self.prov_path(self.stage_name(stage))
        if not p.exists():
            return None
        return json.loads(p.read_text(encoding="utf-8"))

    def _hashes(self, names) -> dict[str, str]:
        return {n: file_hash(self.path(n)) for n in names}

    def check_upstream(self, stage: str) -> None:
        prov = self._load_prov(stage)
        if prov is None:
            raise UpstreamMissing(f"run `{stage}` first (no provenance for {self.stage_name(stage)})")
        if prov["config_hash"] != self.config_hash(stage):
            raise StaleUpstream(f"{self.stage_name(stage)} was produced with a different config; rerun it")
        for name, digest in prov["outputs"].items():
            p = self.path(name)
            if not p.exists():
                raise UpstreamMissing(f"{name} is missing; rerun `{stage}`")
            if file_hash(p) != digest:
                raise StaleUpstream(f"{name} changed since `{stage}` wrote it; rerun `{stage}`")

    def _external_inputs(self, stage: str) -> dict[str, str]:
        c = self.cfg
        paths = []
        if stage == "prepare":
            paths = [c.dataset.interactions]
            if c.dataset.catalog_format not in ("none", "retail") and c.dataset.catalog:
                paths.append(c.dataset.catalog)
        elif stage == "extract":
            paths = [p for p in (c.kg.triples, c.kg.labels, c.cf.embedding_items, c.cf.embedding_users) if p]
        elif stage == "render":
            paths = [p for p in (c.kg.labels,) if p]
        out = {}
        for p in paths:
            full = c.resolve(p)
            if not full.exists():
                raise UpstreamMissing(f"input file {full} does not exist")
            out[str(full)] = file_hash(full)
        return out

    def _inputs(self, stage: str, upstream: tuple[str, ...]) -> dict[str, str]:
        out = self._external_inputs(stage)
        for up in upstream:
            out.update(self._hashes(self.outputs_of(up)))
        return out

    def _up_to_date(self, stage: str, inputs: dict[str, str]) -> bool:
        if self.force:
            return False
        prov = self._load_prov(stage)
        if prov is None or prov.get("partial") or prov["config_hash"] != self.config_hash(stage):
            return False
        if prov["inputs"] != inputs:
            return False
        for name, digest in prov["outputs"].items():
            if not self.path(name).exists() or file_hash(self.path(name)) != digest:
                return False
        return True

    def _record(self, stage: str, inputs: dict[str, str], partial: bool = False) -> None:
        row = {
            "stage": self.stage_name(stage),
            "config_hash": self.config_hash(stage),
            "inputs": inputs,
            "outputs": self._hashes(self.outputs_of(stage)),
            "partial": partial,
        }
        p = self.prov_path(self.stage_name(stage))
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(row, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def _guard(self, stage: str, upstream: tuple[str, ...]):
        for up in upstream:
            self.check_upstream(up)
        inputs = self._inputs(stage, upstream)
        return inputs, self._up_to_date(stage, inputs)

    # ------------------------------------------------------------ loaders
    def load_split(self) -> corpus.SplitCorpus:
        return corpus.read_split_manifest(self.path("split.jsonl"))

    def load_tasks(self) -> list[corpus.RankingTask]:
        return corpus.read_tasks(self.path("tasks.jsonl"))

    def load_catalog(self) -> corpus.ItemCatalog:
        return corpus.read_catalog_jsonl(self.path("catalog.jsonl"))

    def load_stats(self) -> cf.CooccurrenceStats:
        return cf.read_stats(self.path("stats_pairs.tsv"), self.path("stats_freq.tsv"))

    def load_table(self) -> cf.EmbeddingTable:
        return cf.load_table(self.path("emb_items.txt"), self.path("emb_users.txt"), provenance="pipeline")

    def load_packs(self) -> dict:
        return read_packs(self.path(self.outputs_of("knowledge")[0]))

    def entity_labels(self) -> dict[str, str]:
        if not self.cfg.kg.labels:
            return {}
        out = {}
        with open(self.cfg.resolve(self.cfg.kg.labels), encoding="utf-8") as f:
            for line in f:
                parts = line.rstrip("\n").split("\t", 1)
                if len(parts) == 2:
                    out[parts[0]] = parts[1]
        return out

    def knowledge_params(self) -> KnowledgeParams:
        k = self.cfg.knowledge
        return KnowledgeParams(k.history_window, k.i2i_k, k.u2i_n, k.global_m, k.his_i2i_source, k.with_attributes)

    # ------------------------------------------------------------- stages
    def prepare(self) -> StageResult:
        inputs, fresh = self._guard("prepare", ())
        if fresh:
            return StageResult("prepare", cached=True)
        d, s = self.cfg.dataset, self.cfg.sampling
        src = self.cfg.resolve(d.interactions)
        log_ = corpus.parse_interactions(src, d.format, date_format=d.date_format)
        raw_n = len(log_)
        if d.min_rating is not None:
            log_ = corpus.filter_rating(log_, d.min_rating)
        if d.core:
            log_ = corpus.filter_core(log_, d.core)
        catalog = self._read_catalog()
        split = corpus.split_leave_one_out(log_)
        tasks = corpus.build_tasks(split, s.strategy, s.n_neg, s.seed, s.max_history, s.sample_cap or None)

        self.out.mkdir(parents=True, exist_ok=True)
        corpus.write_split_manifest(split, self.path("split.jsonl"))
        corpus.write_tasks(tasks, self.path("tasks.jsonl"))
        corpus.write_catalog_jsonl(catalog.restrict(split.items), self.path("catalog.jsonl"))
        stats = {"raw_interactions": raw_n, "users": len(log_.users), "items": len(log_.items),
                 "interactions": len(log_), "tasks": len(tasks)}
        self.path("dataset_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
        self._record("prepare", inputs)
        return StageResult("prepare", outputs=self.outputs_of("prepare"))

    def _read_catalog(self) -> corpus.ItemCatalog:
        d = self.cfg.dataset
        fmt = d.catalog_format
        if fmt == "retail":
            return corpus.parse_retail_catalog(self.cfg.resolve(d.interactions))
        if fmt == "none" or not d.catalog:
            return corpus.ItemCatalog()
        path = self.cfg.resolve(d.catalog)
        if fmt == "ml1m":
            return corpus.parse_ml1m_movies(path)
        if fmt == "amazon":
            return corpus.parse_amazon_meta(path)
        return corpus.read_catalog_jsonl(path)

    def extract(self) -> StageResult:
        inputs, fresh = self._guard("extract", ("prepare",))
        if fresh:
            return StageResult("extract", cached=True)
        c = self.cfg
        split, catalog, tasks = self.load_split(), self.load_catalog(), self.load_tasks()
        stats = cf.count_cooccurrence(split.train, items=split.items)
        cf.write_stats(stats, self.path("stats_pairs.tsv"), self.path("stats_freq.tsv"))
        if c.cf.embedding_items:
            users = c.resolve(c.cf.embedding_users) if c.cf.embedding_users else None
            table = cf.load_table(c.resolve(c.cf.embedding_items), users)
        else:
            mf = cf.MFConfig(c.cf.dim, c.cf.epochs, c.cf.lr, c.cf.reg, c.cf.neg_per_pos, c.sampling.seed, c.cf.init_std)
            table = cf.train_mf(split.train, mf, items=split.items)
        cf.save_table(table, self.path("emb_users.txt"), self.path("emb_items.txt"))

        links: dict = {}
        cache: dict = {}
        graph = None
        has_attrs = any(rec.attributes for rec in catalog.items.values())
        ext = None
        if c.kg.enabled and c.kg.triples and c.kg.labels:
            ext = kg.ExternalKG.read(c.resolve(c.kg.triples), c.resolve(c.kg.labels))
            links = kg.link_entities(catalog, ext, c.kg.link_threshold)
        if c.kg.enabled and (has_attrs or links):
            graph = kg.build_domain_graph(catalog, split.train, links, ext, stats, hops=c.kg.hops)
            sc = kg.ScorerConfig(c.kg.dim, c.kg.n_buckets, c.kg.epochs, c.kg.lr, c.kg.batch_size, c.kg.neg_ratio,
                                 c.sampling.seed, c.kg.max_len, c.kg.max_paths, c.kg.max_positive_pairs)
            try:
                scorer = kg.train_path_scorer(graph, stats, c.kg.theta, sc)
            except NoPositivePairs as exc:
                log.warning("no reasoning paths: %s", exc)
                scorer = None
            if scorer is not None:
                scorer.save(self.path("scorer.npz"))
                cache = kg.extract_best_paths(graph, scorer, self._path_pairs(tasks, stats, table),
                                              c.kg.max_len, c.kg.max_paths)
        kg.write_links(links, self.path("links.tsv"))
        with open(self.path("graph_edges.tsv"), "w", encoding="utf-8") as f:
            if graph is not None:
                for head in sorted(graph.adj):
                    for rel in sorted(graph.adj[head]):
                        for tail in sorted(graph.adj[head][rel]):
                            f.write(f"{head}\t{rel}\t{tail}\n")
        kg.write_path_cache(cache, self.path("paths.jsonl"))
        self._record("extract", inputs)
        return StageResult("extract", outputs=self.outputs_of("extract"))

    def _path_pairs(self, tasks, stats, table) -> list[tuple[str, str]]:
        p = self.knowledge_params()
        source = table if p.his_i2i_source == "embedding" else stats
        pairs = set()
        for t in tasks:
            for anchor, block in select_history_i2i(t, source, p.history_window, p.i2i_k).i2i_blocks:
                pairs.add((anchor, block[0][0]))
        return sorted(pairs)

    def knowledge(self) -> StageResult:
        inputs, fresh = self._guard("knowledge", ("prepare", "extract"))
        if fresh:
            return StageResult("knowledge", cached=True)
        variant = self.cfg.knowledge.variant
        tasks, stats, table, catalog = self.load_tasks(), self.load_stats(), self.load_table(), self.load_catalog()
        cache = kg.read_path_cache(self.path("paths.jsonl"))
        params = self.knowledge_params()
        global_pack = select_global_i2i(stats, params.global_m) if variant == "global_i2i" else None
        rows = [
            (t.user_id, build_pack(variant, t, stats=stats, table=table, catalog=catalog, path_cache=cache,
                                   params=params, global_pack=global_pack))
            for t in tasks
        ]
        write_packs(rows, self.path(self.outputs_of("knowledge")[0]))
        self._record("knowledge", inputs)
        return StageResult("knowledge", outputs=self.outputs_of("knowledge"))

    def render(self) -> StageResult:
        inputs, fresh = self._guard("render", ("prepare", "knowledge"))
        if fresh:
            return StageResult("render", cached=True)
        tasks, catalog, packs = self.load_tasks(), self.load_catalog(), self.load_packs()
        variant = self.cfg.knowledge.variant
        labels = self.entity_labels()
        budget = self.cfg.prompt.max_tokens or None
        prompts = [
            render_prompt(t, packs[(t.user_id, variant)], self.cfg.template_id, catalog,
                          lexicon=self.lexicon, entity_labels=labels, max_tokens=budget)
            for t in tasks
        ]
        write_prompts(prompts, self.path(self.outputs_of("render")[0]))
        self._record("render", inputs)
        return StageResult("render", outputs=self.outputs_of("render"))

    def make_gateway(self, catalog) -> Gateway:
        g = self.cfg.gateway
        conf = CompletionConfig(g.endpoint, g.model, g.temperature, g.max_tokens, g.timeout, g.max_attempts,
                                g.backoff, 2.0, g.concurrency, g.api_key_env)
        cache_dir = self.cfg.resolve(g.cache_dir) if g.cache_dir else self.out / "llm_cache"
        if self.gateway_factory is not None:
            return self.gateway_factory(conf, g.backend, cache_dir, catalog.title)
        return Gateway(conf, g.backend, cache_dir, title=catalog.title)

    def rank(self) -> StageResult:
        inputs, fresh = self._guard("rank", ("prepare", "knowledge", "render"))
        if fresh:
            return StageResult("rank", cached=True)
        catalog, packs = self.load_catalog(), self.load_packs()
        prompts = read_prompts(self.path(self.outputs_of("render")[0]))
        variant = self.cfg.knowledge.variant
        gateway = self.make_gateway(catalog)
        try:
            results = gateway.complete_many(prompts, [packs.get((p.user_id, variant)) for p in prompts])
        finally:
            gateway.close()
        resp_path, rank_path = (self.path(n) for n in self.outputs_of("rank"))
        skipped = 0
        with open(resp_path, "w", encoding="utf-8") as fr, open(rank_path, "w", encoding="utf-8") as fk:
            for p, res in zip(prompts, results):
                if isinstance(res, Exception):
                    skipped += 1
                    reason = "cache_miss" if isinstance(res, CacheMiss) else f"{type(res).__name__}: {res}"
                    fr.write(json.dumps({"user_id": p.user_id, "status": "skipped", "error": reason}) + "\n")
                    continue
                fr.write(json.dumps({"user_id": p.user_id, "status": "ok", "raw": res}, ensure_ascii=False) + "\n")
                ranked = parse_ranking(res, p.task, catalog.title)
                fk.write(json.dumps({"user_id": p.user_id, **ranked.to_dict()}, sort_keys=True) + "\n")
        if skipped:
            log.warning("%d of %d tasks skipped", skipped, len(prompts))
        self._record("rank", inputs, partial=skipped > 0)
        return StageResult("rank", skipped=skipped, outputs=self.outputs_of("rank"))

    def eval(self) -> StageResult:
        inputs, fresh = self._guard("eval", ("prepare", "extract", "rank"))
        if fresh:
            return StageResult("eval", cached=True)
        c, key = self.cfg, self.cfg.run_key
        tasks = self.load_tasks()
        rankings = {}
        with open(self.path(self.outputs_of("rank")[1]), encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    d = json.loads(line)
                    rankings[d["user_id"]] = RankedList.from_dict(d)
        report = evaluate_run(tasks, rankings, c.eval.ks, variant=key)
        report.write(*(self.path(n) for n in self.outputs_of("eval")), label=key)

        split, catalog = self.load_split(), self.load_catalog()
        indices = BaselineIndices.build(split, self.load_stats(), self.load_table(), catalog)
        for method in c.eval.baselines:
            base = evaluate_run(tasks, [rank_baseline(t, method, indices) for t in tasks], c.eval.ks, variant=method)
            base.write(self.path(f"baseline.{method}.json"), self.path(f"baseline.{method}.txt"),
                       self.path(f"baseline.{method}.tsv"), label=method)
        for axis in c.eval.group_axes:
            g = group_report(report, GroupingSpec(axis), split)
            row = {"axis": axis, "boundary": g.boundary, "flags": g.flags,
                   "low": g.low.to_dict(), "high": g.high.to_dict()}
            self.path(f"groups.{key}.{axis}.json").write_text(json.dumps(row, indent=2, sort_keys=True) + "\n")
        self._record("eval", inputs)
        return StageResult("eval", outputs=self.outputs_of("eval"))

    def run_stage(self, stage: str) -> StageResult:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        return getattr(self, stage)()

