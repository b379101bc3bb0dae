"""End-to-end orchestration: stages, caching, prompt assembly, run manifests.

Stages run in a fixed order (ingest, train-gcn, build-profiles, embed,
finetune-adapter, retrieve, assemble, generate, evaluate); each stage's
input digest covers exactly the config fields and artifact files it reads,
so unrelated config edits never invalidate a cache entry. All artifacts live
in the run directory with the manifest at its root; a stage whose inputs and
recorded outputs are unchanged is skipped without touching any port.

Soft-prompt embedding injection is represented as marker tokens in the
prompt plus sidecar vectors keyed to those markers; downstream consumers
decide how to splice them into a generator.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import corpus as corpus_mod
from . import evalkit, gcn, profiler, retrieval
from .config import PipelineConfig
from .mocks import (
    DeterministicSummarizer,
    EchoGenerator,
    HashEmbedder,
    HashTokenEmbedder,
    LengthRatioJudge,
    LinearSoftmaxHead,
    hash_tokenizer,
)
from .ports import HttpEmbedder, HttpGenerator, HttpJudge, HttpSummarizer

USER_MARKER = "<USER_EMBED>"
ITEM_MARKER = "<ITEM_EMBED>"
PLACEHOLDERS = ("{user_profile}", "{item_profile}", "{retrieved_reviews}")

STAGE_ORDER = [
    "ingest",
    "train-gcn",
    "build-profiles",
    "embed",
    "finetune-adapter",
    "retrieve",
    "assemble",
    "generate",
    "evaluate",
]


class PipelineError(RuntimeError):
    pass


class StageError(PipelineError):
    """A stage failed; carries the stage name and the partial manifest."""

    def __init__(self, stage: str, cause: Exception, manifest: "RunManifest"):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.manifest = manifest


# ---------------------------------------------------------------------------
# prompt assembly


@dataclass
class PromptBundle:
    """Rendered prompt plus the embedding sidecar keyed to the marker tokens."""

    text: str
    sidecar: dict[str, np.ndarray]
    user_id: str
    item_id: str
    retrieved_ids: list[int]
    retrieved_texts: list[str]

    def to_record(self) -> dict:
        return {
            "user_id": self.user_id,
            "item_id": self.item_id,
            "prompt": self.text,
            "sidecar": {
                marker: [float(x) for x in vector]
                for marker, vector in self.sidecar.items()
            },
            "retrieved_ids": self.retrieved_ids,
            "retrieved_texts": self.retrieved_texts,
        }

    @classmethod
    def from_record(cls, record: dict) -> "PromptBundle":
        return cls(
            text=record["prompt"],
            sidecar={m: np.asarray(v) for m, v in record["sidecar"].items()},
            user_id=record["user_id"],
            item_id=record["item_id"],
            retrieved_ids=list(record["retrieved_ids"]),
            retrieved_texts=list(record["retrieved_texts"]),
        )


def assemble_prompt(
    user_profile: profiler.Profile,
    item_profile: profiler.Profile,
    retrieved: Sequence[tuple[int, float, str]],
    user_embedding: np.ndarray,
    item_embedding: np.ndarray,
    template: str,
) -> PromptBundle:
    """Fill the template placeholders and keep both markers in place.

    ``retrieved`` is (opinion id, score, text) in non-increasing score order;
    it renders as a numbered list. The two projected embeddings ride along as
    sidecar vectors keyed to the markers.
    """
    for placeholder in PLACEHOLDERS:
        if placeholder not in template:
            raise PipelineError(f"template is missing placeholder {placeholder}")
    for marker in (USER_MARKER, ITEM_MARKER):
        if template.count(marker) != 1:
            raise PipelineError(
                f"template must contain {marker} exactly once "
                f"(found {template.count(marker)})"
            )
    scores = [score for _, score, _ in retrieved]
    if any(scores[k] < scores[k + 1] for k in range(len(scores) - 1)):
        raise PipelineError("retrieved opinions must be in non-increasing score order")
    user_embedding = np.asarray(user_embedding, dtype=np.float64)
    item_embedding = np.asarray(item_embedding, dtype=np.float64)
    if user_embedding.shape != item_embedding.shape or user_embedding.ndim != 1:
        raise PipelineError("sidecar embeddings must be two vectors of equal width")
    numbered = "\n".join(
        f"{k + 1}. {text}" for k, (_, _, text) in enumerate(retrieved)
    )
    text = (
        template.replace("{user_profile}", user_profile.text)
        .replace("{item_profile}", item_profile.text)
        .replace("{retrieved_reviews}", numbered)
    )
    for marker in (USER_MARKER, ITEM_MARKER):
        if text.count(marker) != 1:
            raise PipelineError(
                f"rendered prompt must contain {marker} exactly once"
            )
    return PromptBundle(
        text=text,
        sidecar={USER_MARKER: user_embedding, ITEM_MARKER: item_embedding},
        user_id=user_profile.subject_id,
        item_id=item_profile.subject_id,
        retrieved_ids=[i for i, _, _ in retrieved],
        retrieved_texts=[t for _, _, t in retrieved],
    )


@dataclass
class GeneratedExplanation:
    user_id: str
    item_id: str
    text: str
    latency_ms: float


def generate(generator: Any, bundle: PromptBundle) -> GeneratedExplanation:
    """Run the generator port on one bundle, verbatim output plus latency."""
    start = time.perf_counter()
    try:
        text = generator.generate(bundle)
    except Exception as exc:
        raise PipelineError(
            f"generation failed for pair ({bundle.user_id}, {bundle.item_id}): {exc}"
        ) from exc
    latency_ms = (time.perf_counter() - start) * 1000.0
    if not text or not text.strip():
        raise PipelineError(
            f"generator returned empty output for pair "
            f"({bundle.user_id}, {bundle.item_id})"
        )
    return GeneratedExplanation(bundle.user_id, bundle.item_id, text, latency_ms)


# ---------------------------------------------------------------------------
# ports


@dataclass
class PortBundle:
    summarizer: Any
    embedder: Any
    generator: Any
    judge: Any
    token_embedder: Any
    head: Any


def build_ports(config: PipelineConfig) -> PortBundle:
    """Instantiate ports per config; the token-likelihood head is always the
    desk-scale mock since no real generator head is hosted here."""
    head = LinearSoftmaxHead(
        d_llm=config.gcn.d_llm,
        vocab_size=config.gcn.vocab_size,
        seed=config.gcn.head_seed,
    )
    if config.ports.mode == "mock":
        return PortBundle(
            summarizer=DeterministicSummarizer(budget=config.ports.budget),
            embedder=HashEmbedder(dim=config.ports.embed_dim),
            generator=EchoGenerator(),
            judge=LengthRatioJudge(),
            token_embedder=HashTokenEmbedder(),
            head=head,
        )
    return PortBundle(
        summarizer=HttpSummarizer(
            base_url=config.ports.summarizer_url,
            model=config.ports.model,
            temperature=0.0,
            budget=config.ports.budget,
        ),
        embedder=HttpEmbedder(base_url=config.ports.embedder_url),
        generator=HttpGenerator(
            base_url=config.ports.generator_url,
            model=config.ports.model,
            temperature=config.generator.temperature,
            max_output_tokens=config.generator.max_output_tokens,
        ),
        judge=HttpJudge(base_url=config.ports.judge_url, model=config.ports.model),
        token_embedder=HashTokenEmbedder(),
        head=head,
    )


# ---------------------------------------------------------------------------
# manifest


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class StageRecord:
    name: str
    status: str  # ran | cached | skipped
    input_digest: str = ""
    outputs: dict[str, str] = field(default_factory=dict)
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "status": self.status,
            "input_digest": self.input_digest,
            "outputs": self.outputs,
            "detail": self.detail,
        }


@dataclass
class RunManifest:
    config_digest: str
    query_type: str
    seeds: dict[str, int]
    threads: int
    stages: list[StageRecord] = field(default_factory=list)
    artifacts: dict[str, dict[str, str]] = field(default_factory=dict)
    leakage_check: str = "skipped"
    skipped_pairs: list[dict] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def stable_dict(self) -> dict:
        """Everything reproducible across identical runs; timings excluded."""
        return {
            "config_digest": self.config_digest,
            "query_type": self.query_type,
            "seeds": self.seeds,
            "threads": self.threads,
            "stages": [s.to_dict() for s in self.stages],
            "artifacts": self.artifacts,
            "leakage_check": self.leakage_check,
            "skipped_pairs": self.skipped_pairs,
        }

    def to_dict(self) -> dict:
        out = self.stable_dict()
        out["timings"] = self.timings
        return out

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    def record_artifact(self, run_dir: Path, relative: str) -> None:
        digest = file_digest(run_dir / relative)
        self.artifacts[relative] = {"sha256": digest, "short64": digest[:16]}


# ---------------------------------------------------------------------------
# stage machinery


@dataclass
class StageContext:
    config: PipelineConfig
    ports: PortBundle
    run_dir: Path
    manifest: RunManifest

    def path(self, relative: str) -> Path:
        return self.run_dir / relative

    def read_jsonl(self, relative: str) -> list[dict]:
        records = []
        with self.path(relative).open("r", encoding="utf-8") as handle:
            for line in handle:
                records.append(json.loads(line))
        return records

    def write_jsonl(self, relative: str, records: Sequence[dict]) -> None:
        with self.path(relative).open("w", encoding="utf-8") as handle:
            for record in records:
                handle.write(json.dumps(record, ensure_ascii=False) + "\n")

    def write_json(self, relative: str, payload: dict) -> None:
        self.path(relative).write_text(
            json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8"
        )


@dataclass
class Stage:
    name: str
    config_slice: Callable[[PipelineConfig], dict]
    inputs: Callable[[StageContext], list[str]]  # artifact relpaths read
    outputs: list[str]
    execute: Callable[[StageContext], str]  # returns a detail string
    external_inputs: Callable[[StageContext], dict[str, str]] = lambda ctx: {}

    def input_digest(self, ctx: StageContext) -> str:
        payload = {
            "config": self.config_slice(ctx.config),
            "inputs": {},
            "external": self.external_inputs(ctx),
        }
        for relative in self.inputs(ctx):
            payload["inputs"][relative] = file_digest(ctx.path(relative))
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _cache_path(ctx: StageContext, stage: Stage) -> Path:
    return ctx.run_dir / ".stages" / f"{stage.name}.json"


def _cache_hit(ctx: StageContext, stage: Stage, input_digest: str) -> dict | None:
    cache_file = _cache_path(ctx, stage)
    if not cache_file.exists():
        return None
    try:
        cached = json.loads(cache_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return None
    if cached.get("input_digest") != input_digest:
        return None
    for relative, digest in cached.get("outputs", {}).items():
        path = ctx.path(relative)
        if not path.exists() or file_digest(path) != digest:
            return None
    return cached


def _record_outputs(ctx: StageContext, stage: Stage, input_digest: str) -> dict[str, str]:
    outputs = {}
    for relative in stage.outputs:
        path = ctx.path(relative)
        if path.exists():
            outputs[relative] = file_digest(path)
            ctx.manifest.record_artifact(ctx.run_dir, relative)
    cache_file = _cache_path(ctx, stage)
    cache_file.parent.mkdir(parents=True, exist_ok=True)
    cache_file.write_text(
        json.dumps({"input_digest": input_digest, "outputs": outputs}, indent=2),
        encoding="utf-8",
    )
    return outputs


# ---------------------------------------------------------------------------
# stage implementations


def _ports_slice(config: PipelineConfig, *keys: str) -> dict:
    base = {"mode": config.ports.mode}
    for key in keys:
        base[key] = getattr(config.ports, key)
    return base


def _stage_ingest(ctx: StageContext) -> str:
    cfg = ctx.config
    dataset = corpus_mod.load_reviews(
        cfg.reviews_path, allow_duplicates=cfg.data.allow_duplicates
    )
    corpus_mod.write_reviews(dataset, ctx.path("dataset.jsonl"))
    spec = corpus_mod.SplitSpec(
        train_fraction=cfg.split.train_fraction, seed=cfg.split.seed
    )
    train, test = corpus_mod.split(dataset, spec)
    corpus_mod.write_reviews(train, ctx.path("train.jsonl"))
    corpus_mod.write_reviews(test, ctx.path("test.jsonl"))
    corpus_mod.write_split_manifest(ctx.path("split.json"), spec, train, test)
    graph = corpus_mod.build_interaction_graph(dataset)
    ctx.write_json(
        "corpus_stats.json",
        {
            "reviews": len(dataset),
            "users": dataset.num_users,
            "items": dataset.num_items,
            "edges": graph.num_edges,
            "train": len(train),
            "test": len(test),
        },
    )
    return f"{len(dataset)} reviews, {len(train)} train / {len(test)} test"


def _load_datasets(ctx: StageContext) -> tuple:
    """Canonical corpus plus partitions; ids stay the dataset.jsonl line numbers."""
    full = corpus_mod.load_reviews(ctx.path("dataset.jsonl"), allow_duplicates=True)
    manifest = json.loads(ctx.path("split.json").read_text(encoding="utf-8"))
    train = corpus_mod.subset_by_ids(full, manifest["train"])
    test = corpus_mod.subset_by_ids(full, manifest["test"])
    return full, train, test


def _stage_train_gcn(ctx: StageContext) -> str:
    cfg = ctx.config
    full, train, _ = _load_datasets(ctx)
    graph = corpus_mod.build_interaction_graph(full)
    batches = []
    pairs, targets = [], []
    for review in train.reviews:
        text = review.explanation or review.text
        pairs.append(
            (graph.user_ordinal(review.user_id), graph.item_ordinal(review.item_id))
        )
        targets.append(hash_tokenizer(text, cfg.gcn.vocab_size))
        if len(pairs) == cfg.gcn.batch_size:
            batches.append(gcn.TrainBatch(pairs=pairs, targets=targets))
            pairs, targets = [], []
    if pairs:
        batches.append(gcn.TrainBatch(pairs=pairs, targets=targets))
    gcn_config = gcn.GcnConfig(
        d_gcn=cfg.gcn.d_gcn,
        d_llm=cfg.gcn.d_llm,
        hidden=cfg.gcn.hidden,
        layers=cfg.gcn.layers,
        learning_rate=cfg.gcn.learning_rate,
        epochs=cfg.gcn.epochs,
        seed=cfg.gcn.seed,
        per_token_normalization=cfg.gcn.per_token_normalization,
    )
    table, net = gcn.train_adaptor(graph, ctx.ports.head, batches, gcn_config)
    gcn.save_checkpoint(ctx.path("gcn.rxge"), table, net)
    loss = gcn.training_loss(graph, table, net, ctx.ports.head, batches)
    return f"trained on {sum(b.size for b in batches)} pairs, final loss {loss:.4f}"


def _profiler_config(cfg: PipelineConfig) -> profiler.ProfilerConfig:
    return profiler.ProfilerConfig(
        arity=cfg.profiler.arity,
        shuffle_seed=cfg.profiler.shuffle_seed,
        mode=cfg.profiler.mode,
        sample_size=cfg.profiler.sample_size,
        max_concurrency=cfg.profiler.max_concurrency,
        retries=cfg.profiler.retries,
        backoff=cfg.profiler.backoff,
        opinion_instruction=cfg.template_text(cfg.profiler.opinion_template),
        merge_instruction=cfg.template_text(cfg.profiler.merge_template),
        include_item_profiles=cfg.profiler.include_item_profiles,
    )


def _stage_build_profiles(ctx: StageContext) -> str:
    cfg = ctx.config
    _, train, _ = _load_datasets(ctx)
    pconfig = _profiler_config(cfg)
    summarizer = ctx.ports.summarizer

    def build(kind: str, subject: str) -> profiler.Profile:
        if pconfig.mode != "hierarchical":
            return profiler.profile_ablation(train, kind, subject, summarizer, pconfig)
        if kind == "item":
            return profiler.build_item_profile(train, subject, summarizer, pconfig)
        return profiler.build_user_profile(
            train, subject, summarizer, pconfig, item_profile_texts
        )

    profiles: list[profiler.Profile] = []
    item_profile_texts: dict[str, str] = {}
    for item_id in sorted(train.by_item):
        profile = build("item", item_id)
        profiles.append(profile)
        item_profile_texts[item_id] = profile.text
    for user_id in sorted(train.by_user):
        profiles.append(build("user", user_id))
    profiler.write_profiles(profiles, ctx.path("profiles.jsonl"))
    opinions = profiler.build_opinions(train, summarizer, pconfig)
    profiler.write_opinions(opinions, ctx.path("opinions.jsonl"))
    return f"{len(profiles)} profiles, {len(opinions)} opinions"


def _stage_embed(ctx: StageContext) -> str:
    cfg = ctx.config
    opinions = profiler.read_opinions(ctx.path("opinions.jsonl"))
    index = retrieval.embed_opinions(
        ctx.ports.embedder,
        opinions,
        batch_size=cfg.retrieval.embed_batch_size,
        retries=cfg.ports.retries,
        backoff=cfg.ports.backoff,
    )
    retrieval.save_embedding_cache(
        ctx.path("embeddings.rxha"), index.ids.tolist(), index.rows.astype(np.float32)
    )
    return f"{len(index)} opinion vectors, width {index.dim}"


def _load_index(ctx: StageContext) -> retrieval.VectorIndex:
    ids, rows = retrieval.load_embedding_cache(ctx.path("embeddings.rxha"))
    _, train, _ = _load_datasets(ctx)
    opinions = profiler.read_opinions(ctx.path("opinions.jsonl"), train)
    meta_by_id = {op.review_id: (op.user_id, op.item_id) for op in opinions}
    unit, zero_mask = retrieval.unit_rows(rows)
    return retrieval.VectorIndex(
        ids=ids,
        rows=unit,
        meta=[meta_by_id[int(i)] for i in ids],
        zero_mask=zero_mask,
    )


def _profiles_by_subject(ctx: StageContext) -> dict[tuple[str, str], profiler.Profile]:
    profiles = profiler.read_profiles(ctx.path("profiles.jsonl"))
    return {(p.kind, p.subject_id): p for p in profiles}


def _pair_profile_pairs(
    ctx: StageContext, train: corpus_mod.Dataset
) -> list[tuple[str, str]]:
    """(pair profile text, pair opinion text) training pairs from the train split."""
    profiles = _profiles_by_subject(ctx)
    opinions = profiler.read_opinions(ctx.path("opinions.jsonl"))
    opinion_by_id = {op.review_id: op for op in opinions}
    pairs = []
    for review in train.reviews:
        user = profiles.get(("user", review.user_id))
        item = profiles.get(("item", review.item_id))
        opinion = opinion_by_id.get(review.review_id)
        if user is None or item is None or opinion is None:
            continue
        pairs.append((f"{user.text}\n{item.text}", opinion.text))
    return pairs


def _stage_finetune_adapter(ctx: StageContext) -> str:
    cfg = ctx.config
    _, train, _ = _load_datasets(ctx)
    pairs = _pair_profile_pairs(ctx, train)
    config = retrieval.ContrastiveConfig(
        temperature=cfg.retrieval.temperature,
        batch_size=cfg.retrieval.adapter_batch_size,
        learning_rate=cfg.retrieval.adapter_learning_rate,
        steps=cfg.retrieval.adapter_steps,
        seed=cfg.retrieval.adapter_seed,
        negatives=cfg.retrieval.negatives,
    )
    params = retrieval.fit_adapter(
        pairs,
        ctx.ports.embedder,
        config,
        retries=cfg.ports.retries,
        backoff=cfg.ports.backoff,
    )
    params.save(ctx.path("adapter.npz"))
    return (
        f"{len(pairs)} pairs, loss {params.loss_history[0]:.4f} -> "
        f"{params.loss_history[-1]:.4f}"
    )


def _stage_retrieve(ctx: StageContext) -> str:
    cfg = ctx.config
    _, train, test = _load_datasets(ctx)
    index = _load_index(ctx)
    query_type = cfg.retrieval.query_type
    adapter = None
    profiles: dict[tuple[str, str], profiler.Profile] = {}
    if query_type == "profile":
        adapter = retrieval.AdapterParams.load(ctx.path("adapter.npz"))
        profiles = _profiles_by_subject(ctx)
    records = []
    skipped = []
    for review in test.reviews:
        exclude = {(review.user_id, review.item_id)}
        try:
            if query_type == "latent":
                user_ids = [
                    train.reviews[p].review_id for p in train.by_user.get(review.user_id, [])
                ]
                item_ids = [
                    train.reviews[p].review_id for p in train.by_item.get(review.item_id, [])
                ]
                if not user_ids or not item_ids:
                    raise retrieval.RetrievalError("no train opinions on one side")
                query = retrieval.latent_query(
                    index.rows_for_ids(user_ids), index.rows_for_ids(item_ids)
                )
            else:
                user_profile = profiles.get(("user", review.user_id))
                item_profile = profiles.get(("item", review.item_id))
                if user_profile is None or item_profile is None:
                    raise retrieval.RetrievalError("missing pair profiles")
                query = retrieval.profile_query(
                    adapter,
                    ctx.ports.embedder,
                    user_profile,
                    item_profile,
                    retries=cfg.ports.retries,
                    backoff=cfg.ports.backoff,
                )
        except retrieval.RetrievalError as exc:
            skipped.append(
                {"user_id": review.user_id, "item_id": review.item_id, "reason": str(exc)}
            )
            continue
        result = retrieval.retrieve_top_q(
            index,
            query,
            cfg.retrieval.top_q,
            exclude,
            query_id=f"{review.user_id}:{review.item_id}",
        )
        records.append(
            {
                "user_id": review.user_id,
                "item_id": review.item_id,
                "query_type": query_type,
                "hits": [{"id": i, "score": s} for i, s in result.hits],
            }
        )
    ctx.write_jsonl("retrievals.jsonl", records)
    ctx.manifest.skipped_pairs.extend(skipped)
    return f"{len(records)} pairs retrieved, {len(skipped)} skipped"


def _stage_assemble(ctx: StageContext) -> str:
    cfg = ctx.config
    full, _, test = _load_datasets(ctx)
    template = cfg.template_text(cfg.generator.template)
    profiles = _profiles_by_subject(ctx)
    opinions = {op.review_id: op for op in profiler.read_opinions(ctx.path("opinions.jsonl"))}
    retrievals = {
        (r["user_id"], r["item_id"]): r for r in ctx.read_jsonl("retrievals.jsonl")
    }
    graph = corpus_mod.build_interaction_graph(full)
    table, net = gcn.load_checkpoint(ctx.path("gcn.rxge"))
    users_final, items_final = gcn.propagate_and_aggregate(
        graph, table.users, table.items, table.layers
    )
    records = []
    leakage_failures = 0
    skipped = []
    for review in test.reviews:
        key = (review.user_id, review.item_id)
        user_profile = profiles.get(("user", review.user_id))
        item_profile = profiles.get(("item", review.item_id))
        retrieved_record = retrievals.get(key)
        if user_profile is None or item_profile is None or retrieved_record is None:
            skipped.append(
                {
                    "user_id": review.user_id,
                    "item_id": review.item_id,
                    "reason": "missing profile or retrieval",
                }
            )
            continue
        hits = [
            (h["id"], h["score"], opinions[h["id"]].text)
            for h in retrieved_record["hits"]
        ]
        user_vec = gcn.project(net, users_final[graph.user_ordinal(review.user_id)])
        item_vec = gcn.project(net, items_final[graph.item_ordinal(review.item_id)])
        bundle = assemble_prompt(
            user_profile, item_profile, hits, user_vec, item_vec, template
        )
        explanation = (review.explanation or "").strip()
        if explanation and explanation in bundle.text:
            leakage_failures += 1
        records.append(bundle.to_record())
    ctx.write_jsonl("bundles.jsonl", records)
    ctx.manifest.skipped_pairs.extend(skipped)
    ctx.manifest.leakage_check = "failed" if leakage_failures else "passed"
    if leakage_failures:
        raise PipelineError(
            f"{leakage_failures} assembled prompts contain their pair's "
            f"ground-truth explanation"
        )
    return f"{len(records)} bundles assembled, leakage check passed"


def _stage_generate(ctx: StageContext) -> str:
    bundles = [PromptBundle.from_record(r) for r in ctx.read_jsonl("bundles.jsonl")]
    records = []
    for bundle in bundles:
        outcome = generate(ctx.ports.generator, bundle)
        records.append(
            {
                "user_id": outcome.user_id,
                "item_id": outcome.item_id,
                "explanation": outcome.text,
                "latency_ms": round(outcome.latency_ms, 3),
            }
        )
    # latency is wall time: keep it in the volatile jsonl only, stripped copy digested
    stable = [
        {k: r[k] for k in ("user_id", "item_id", "explanation")} for r in records
    ]
    ctx.write_jsonl("explanations.jsonl", stable)
    ctx.write_jsonl("generation_log.jsonl", records)
    return f"{len(records)} explanations generated"


def _stage_evaluate(ctx: StageContext) -> str:
    cfg = ctx.config
    _, _, test = _load_datasets(ctx)
    generated = {
        (r["user_id"], r["item_id"]): r["explanation"]
        for r in ctx.read_jsonl("explanations.jsonl")
    }
    references, candidates = [], []
    for review in test.reviews:
        key = (review.user_id, review.item_id)
        if key in generated and review.explanation and review.explanation.strip():
            references.append(review.explanation)
            candidates.append(generated[key])
    if not references:
        raise PipelineError("no (reference, candidate) pairs to evaluate")
    report = evalkit.score_pairs(
        references,
        candidates,
        ctx.ports.token_embedder,
        ctx.ports.judge,
        cfg.template_text(cfg.eval.judge_template),
        standard_orientation=cfg.eval.standard_orientation,
    )
    report.write(ctx.path("report.json"))
    return (
        f"n={report.n} bert_f1={report.bert_f1.mean:.4f} "
        f"judge={report.judge.mean if report.judge else float('nan'):.2f}"
    )


# ---------------------------------------------------------------------------
# stage table


def _stages() -> list[Stage]:
    return [
        Stage(
            name="ingest",
            config_slice=lambda c: {
                "data": dataclass_slice(c.data),
                "split": dataclass_slice(c.split),
            },
            inputs=lambda ctx: [],
            external_inputs=lambda ctx: {
                "reviews": file_digest(ctx.config.reviews_path)
            },
            outputs=["dataset.jsonl", "train.jsonl", "test.jsonl", "split.json",
                     "corpus_stats.json"],
            execute=_stage_ingest,
        ),
        Stage(
            name="train-gcn",
            config_slice=lambda c: {"gcn": dataclass_slice(c.gcn)},
            inputs=lambda ctx: ["dataset.jsonl", "split.json"],
            outputs=["gcn.rxge"],
            execute=_stage_train_gcn,
        ),
        Stage(
            name="build-profiles",
            config_slice=lambda c: {
                "profiler": dataclass_slice(c.profiler),
                "ports": _ports_slice(c, "model", "summarizer_url", "budget"),
                "templates": {
                    "opinion": c.template_text(c.profiler.opinion_template),
                    "merge": c.template_text(c.profiler.merge_template),
                },
            },
            inputs=lambda ctx: ["dataset.jsonl", "split.json"],
            outputs=["profiles.jsonl", "opinions.jsonl"],
            execute=_stage_build_profiles,
        ),
        Stage(
            name="embed",
            config_slice=lambda c: {
                "batch": c.retrieval.embed_batch_size,
                "ports": _ports_slice(c, "embedder_url", "embed_dim"),
            },
            inputs=lambda ctx: ["opinions.jsonl"],
            outputs=["embeddings.rxha"],
            execute=_stage_embed,
        ),
        Stage(
            name="finetune-adapter",
            config_slice=lambda c: {
                "contrastive": {
                    "temperature": c.retrieval.temperature,
                    "learning_rate": c.retrieval.adapter_learning_rate,
                    "steps": c.retrieval.adapter_steps,
                    "batch_size": c.retrieval.adapter_batch_size,
                    "seed": c.retrieval.adapter_seed,
                    "negatives": c.retrieval.negatives,
                },
                "ports": _ports_slice(c, "embedder_url", "embed_dim"),
            },
            inputs=lambda ctx: ["dataset.jsonl", "split.json", "profiles.jsonl",
                                "opinions.jsonl"],
            outputs=["adapter.npz"],
            execute=_stage_finetune_adapter,
        ),
        Stage(
            name="retrieve",
            config_slice=lambda c: {
                "top_q": c.retrieval.top_q,
                "query_type": c.retrieval.query_type,
                "ports": _ports_slice(c, "embedder_url", "embed_dim"),
            },
            inputs=lambda ctx: (
                ["dataset.jsonl", "split.json", "embeddings.rxha", "opinions.jsonl"]
                + (
                    ["adapter.npz", "profiles.jsonl"]
                    if ctx.config.retrieval.query_type == "profile"
                    else []
                )
            ),
            outputs=["retrievals.jsonl"],
            execute=_stage_retrieve,
        ),
        Stage(
            name="assemble",
            config_slice=lambda c: {
                "template": c.template_text(c.generator.template),
            },
            inputs=lambda ctx: [
                "dataset.jsonl", "split.json", "retrievals.jsonl",
                "profiles.jsonl", "opinions.jsonl", "gcn.rxge",
            ],
            outputs=["bundles.jsonl"],
            execute=_stage_assemble,
        ),
        Stage(
            name="generate",
            config_slice=lambda c: {
                "generator": {
                    "temperature": c.generator.temperature,
                    "max_output_tokens": c.generator.max_output_tokens,
                },
                "ports": _ports_slice(c, "generator_url", "model"),
            },
            inputs=lambda ctx: ["bundles.jsonl"],
            outputs=["explanations.jsonl"],
            execute=_stage_generate,
        ),
        Stage(
            name="evaluate",
            config_slice=lambda c: {
                "eval": dataclass_slice(c.eval),
                "judge_template": c.template_text(c.eval.judge_template),
                "ports": _ports_slice(c, "judge_url", "model"),
            },
            inputs=lambda ctx: ["dataset.jsonl", "split.json", "explanations.jsonl"],
            outputs=["report.json"],
            execute=_stage_evaluate,
        ),
    ]


def dataclass_slice(section) -> dict:
    return dataclasses.asdict(section)


def _should_skip(stage: Stage, config: PipelineConfig) -> str | None:
    if stage.name == "finetune-adapter" and config.retrieval.query_type != "profile":
        return "query_type is latent; adapter not needed"
    if stage.name == "generate" and not config.run.generate:
        return "generation disabled in config"
    if stage.name == "evaluate" and not (config.run.generate and config.run.evaluate):
        return "evaluation disabled in config"
    return None


def run_pipeline(
    config: PipelineConfig,
    ports: PortBundle | None = None,
    *,
    until: str | None = None,
) -> RunManifest:
    """Run stages in order through ``until`` (default: all), with caching.

    Any stage failure halts the run; the partial manifest is written to the
    run directory and carried on the raised StageError.
    """
    config.validate()
    if until is not None and until not in STAGE_ORDER:
        raise PipelineError(f"unknown stage {until!r}")
    ports = ports or build_ports(config)
    run_dir = config.out_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        config_digest=config.digest(),
        query_type=config.retrieval.query_type,
        seeds={
            "split": config.split.seed,
            "profiler_shuffle": config.profiler.shuffle_seed,
            "gcn": config.gcn.seed,
            "adapter": config.retrieval.adapter_seed,
            "run": config.run.seed,
        },
        threads=config.run.threads,
    )
    ctx = StageContext(config=config, ports=ports, run_dir=run_dir, manifest=manifest)
    for stage in _stages():
        skip_reason = _should_skip(stage, config)
        if skip_reason is not None:
            manifest.stages.append(
                StageRecord(name=stage.name, status="skipped", detail=skip_reason)
            )
            if until == stage.name:
                break
            continue
        try:
            input_digest = stage.input_digest(ctx)
            cached = _cache_hit(ctx, stage, input_digest)
            if cached is not None:
                for relative in cached["outputs"]:
                    manifest.record_artifact(run_dir, relative)
                manifest.stages.append(
                    StageRecord(
                        name=stage.name,
                        status="cached",
                        input_digest=input_digest,
                        outputs=cached["outputs"],
                        detail="outputs reused",
                    )
                )
                if stage.name == "assemble":
                    manifest.leakage_check = "passed"
            else:
                started = time.perf_counter()
                detail = stage.execute(ctx)
                manifest.timings[stage.name] = round(
                    time.perf_counter() - started, 6
                )
                outputs = _record_outputs(ctx, stage, input_digest)
                manifest.stages.append(
                    StageRecord(
                        name=stage.name,
                        status="ran",
                        input_digest=input_digest,
                        outputs=outputs,
                        detail=detail,
                    )
                )
        except Exception as exc:
            manifest.stages.append(
                StageRecord(name=stage.name, status="failed", detail=str(exc))
            )
            manifest.write(run_dir / "manifest.json")
            raise StageError(stage.name, exc, manifest) from exc
        if until == stage.name:
            break
    manifest.write(run_dir / "manifest.json")
    return manifest
