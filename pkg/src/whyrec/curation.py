"""Training-set pruning, graph-to-text translation, and prompt assembly.

Pruning keeps the training pairs whose ground-truth explanation is furthest
(in embedding space) from the concatenated user/item profiles; those pairs
need the retrieved graph evidence the most.  Retained pairs are rendered
into a fixed prompt template together with retrieved neighbor profiles and
verbalized paths, then exported as line-delimited prompt/response records
for retrieval-augmented fine-tuning elsewhere.

The prompt template is byte-stable: identical inputs always produce
identical prompts, and tests pin golden files against it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .graphstore import GraphError, InteractionGraph, NodeKind, NodeRef
from .pathexplain import PathExplanation
from .retrieval import RetrievalResult, cosine

PROMPT_TEMPLATE = (
    "Given the item title, item profile, and user profile, please explain why "
    "the user would enjoy this item. "
    "Item title: {title}. "
    "Item profile: {item_profile}. "
    "User profile: {user_profile}. "
    "For the user-item pair, here are some related users and items. "
    "Users: {users}. "
    "Items: {items}. "
    "For the given user-item pair, here are several related paths connecting "
    "users and items through their interactions. {paths}\n"
    "Explanations:"
)

# Placeholders for empty sections: the template supplies the period after
# the Users/Items fields but not after the paths field.
EMPTY_LIST_TEXT = "None"
EMPTY_PATHS_TEXT = "None."

LIST_JOINER = ", "
PROFILE_JOINER = " "

FORWARD_CONNECTOR = " -> buys -> "
BACKWARD_CONNECTOR = " -> bought by -> "

MAX_PROMPT_BYTES = 1 << 20


@dataclass
class TrainingSample:
    user: NodeRef
    item: NodeRef
    explanation: str
    reliance: float | None = None


@dataclass(frozen=True)
class PromptSample:
    prompt: str
    target: str | None
    provenance: dict = field(compare=False)


@dataclass(frozen=True)
class PruneConfig:
    ratio: float = 0.7
    embedding_source: str = "hash"

    def validate(self) -> None:
        if not 0.0 <= self.ratio < 1.0:
            raise GraphError("prune ratio must lie in [0, 1)")


# ---------------------------------------------------------------------------
# reliance scoring and pruning


def concat_profiles(user_profile: str, item_profile: str) -> str:
    return user_profile + PROFILE_JOINER + item_profile


def reliance_score(graph: InteractionGraph, sample: TrainingSample, embedder) -> float:
    """Cosine between the joint profile text and the explanation embedding."""
    joint = concat_profiles(graph.profile(sample.user), graph.profile(sample.item))
    vectors = embedder.embed([joint, sample.explanation])
    return cosine(vectors[0], vectors[1])


def compute_reliance(graph: InteractionGraph, samples: Sequence[TrainingSample],
                     embedder) -> None:
    """Fill ``reliance`` on every sample, embedding all texts in one batch."""
    if not samples:
        return
    texts = []
    for s in samples:
        texts.append(concat_profiles(graph.profile(s.user), graph.profile(s.item)))
        texts.append(s.explanation)
    vectors = embedder.embed(texts)
    for k, s in enumerate(samples):
        s.reliance = cosine(vectors[2 * k], vectors[2 * k + 1])


def kept_count(n_samples: int, ratio: float) -> int:
    # The small backoff keeps binary rounding from nudging an exact product
    # like 0.3 * 10 just above its integer value, which would inflate the
    # ceiling by one.
    return math.ceil((1.0 - ratio) * n_samples - 1e-9)


def prune_dataset(samples: Sequence[TrainingSample], ratio: float) -> list[TrainingSample]:
    """Keep the ceil((1-ratio)*|D|) samples least explainable from profiles.

    Sort is ascending by reliance with (user index, item index) breaking
    ties, so equal-score datasets prune deterministically.
    """
    if not 0.0 <= ratio < 1.0:
        raise GraphError("prune ratio must lie in [0, 1)")
    for s in samples:
        if s.reliance is None:
            raise GraphError(
                f"sample ({s.user}, {s.item}) has no reliance score; "
                "run compute_reliance first"
            )
    ranked = sorted(samples, key=lambda s: (s.reliance, s.user.index, s.item.index))
    return ranked[:kept_count(len(samples), ratio)]


# ---------------------------------------------------------------------------
# graph translation


def translate_path(path, profiles: Mapping[NodeRef, str]) -> str:
    """Flatten an alternating user/item path into connector-joined profiles.

    ``path`` is a ScoredPath or a plain node-ref sequence starting at a
    user; traversal direction decides the connector ("buys" leaving a user,
    "bought by" leaving an item).  No trailing connector is emitted.
    """
    nodes = tuple(path.nodes) if hasattr(path, "nodes") else tuple(path)
    if not nodes:
        raise GraphError("cannot translate an empty path")
    if nodes[0].kind != NodeKind.USER:
        raise GraphError("path translation must start at a user node")
    for a, b in zip(nodes, nodes[1:]):
        if a.kind == b.kind:
            raise GraphError("path does not alternate user/item kinds")
    parts = []
    for ref in nodes:
        if ref not in profiles:
            raise GraphError(f"no profile text for path node {ref}")
        parts.append(profiles[ref])
        parts.append(FORWARD_CONNECTOR if ref.kind == NodeKind.USER
                     else BACKWARD_CONNECTOR)
    return "".join(parts[:-1])


def _profile_map(graph: InteractionGraph, refs) -> dict[NodeRef, str]:
    return {ref: graph.profile(ref) for ref in refs}


# ---------------------------------------------------------------------------
# prompt assembly


def build_prompt(graph: InteractionGraph, pair: tuple[NodeRef, NodeRef],
                 retrieval: RetrievalResult,
                 paths: PathExplanation | Sequence[Sequence[NodeRef]],
                 target: str | None = None) -> PromptSample:
    """Fill the prompt template for one pair; byte-stable for fixed inputs."""
    u_ref, i_ref = pair
    graph.require(u_ref, NodeKind.USER)
    graph.require(i_ref, NodeKind.ITEM)
    if isinstance(paths, PathExplanation):
        node_sequences: list[tuple[NodeRef, ...]] = [p.nodes for p in paths.paths]
    else:
        node_sequences = [tuple(p) for p in paths]

    user_texts = [graph.profile(ref) for ref, _ in retrieval.users]
    item_texts = [graph.profile(ref) for ref, _ in retrieval.items]
    path_texts = []
    for nodes in node_sequences:
        path_texts.append(translate_path(nodes, _profile_map(graph, nodes)))

    title = graph.title(i_ref)
    prompt = PROMPT_TEMPLATE.format(
        title=title if title else EMPTY_LIST_TEXT,
        item_profile=graph.profile(i_ref),
        user_profile=graph.profile(u_ref),
        users=LIST_JOINER.join(user_texts) if user_texts else EMPTY_LIST_TEXT,
        items=LIST_JOINER.join(item_texts) if item_texts else EMPTY_LIST_TEXT,
        paths=LIST_JOINER.join(path_texts) if path_texts else EMPTY_PATHS_TEXT,
    )
    if len(prompt.encode("utf-8")) > MAX_PROMPT_BYTES:
        raise GraphError(
            f"prompt for ({graph.node_id(u_ref)}, {graph.node_id(i_ref)}) "
            f"exceeds {MAX_PROMPT_BYTES} bytes"
        )
    provenance = {
        "user": graph.node_id(u_ref),
        "item": graph.node_id(i_ref),
        "paths": [[graph.node_id(ref) for ref in nodes] for nodes in node_sequences],
        "retrieved_users": [graph.node_id(ref) for ref, _ in retrieval.users],
        "retrieved_items": [graph.node_id(ref) for ref, _ in retrieval.items],
    }
    return PromptSample(prompt=prompt, target=target, provenance=provenance)


# ---------------------------------------------------------------------------
# export


FINE_TUNE_DEFAULTS = {
    "method": "lora",
    "rank": 8,
    "learning_rate": 2e-5,
    "epochs": 2,
    "max_seq_len": 2048,
}


def export_raft(pruned: Sequence[TrainingSample],
                prompts: Mapping[tuple[str, str], PromptSample],
                graph: InteractionGraph, out_path) -> int:
    """Write one {"prompt", "response", "meta"} line per pruned sample.

    ``prompts`` is keyed by (user id, item id); a pruned sample without a
    prompt is an error.  A sidecar manifest next to the output records the
    count and suggested fine-tuning settings for downstream trainers.
    """
    records = []
    for s in pruned:
        key = (graph.node_id(s.user), graph.node_id(s.item))
        if key not in prompts:
            raise GraphError(f"no prompt built for pruned pair {key}")
        ps = prompts[key]
        meta = dict(ps.provenance)
        meta["reliance"] = s.reliance
        records.append({"prompt": ps.prompt, "response": s.explanation, "meta": meta})
    with open(out_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {
        "records": len(records),
        "fine_tune_defaults": FINE_TUNE_DEFAULTS,
        "profile_joiner": PROFILE_JOINER,
    }
    with open(f"{out_path}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return len(records)
