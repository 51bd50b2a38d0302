"""Knowledge expression and prompt rendering."""
from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Union

from .corpus import ItemCatalog, RankingTask
from .errors import MissingPlaceholder
from .kg import ReasoningPath, node_type
from .knowledge import VARIANTS, KnowledgePack

SENSITIVITY_TEMPLATES = ("doke_prompt1", "doke_prompt2", "doke_prompt3")
TEMPLATE_IDS = VARIANTS + SENSITIVITY_TEMPLATES

LEXICONS = {
    "movie": {"item": "movie", "items": "movies", "act": "watch", "acting": "watching",
              "acted": "watched", "co_acted": "co-watched"},
    "product": {"item": "product", "items": "products", "act": "purchase", "acting": "purchasing",
                "acted": "purchased", "co_acted": "co-purchased"},
}
DATASET_LEXICON = {"ml1m": "movie", "amazon_jsonl": "product", "retail_csv": "product", "generic_tsv": "product"}

# which pack variants can fill each knowledge placeholder
_KNOWLEDGE_FIELDS = {
    "global_i2i_text": ("global_i2i",),
    "his_i2i_text": ("his_i2i", "his_i2i_path"),
    "his_cand_i2i_text": ("his_cand_i2i",),
    "his_u2i_titles": ("his_u2i",),
    "his_cand_u2i_titles": ("his_cand_u2i",),
    "path_text": ("his_i2i_path",),
}


@lru_cache(maxsize=None)
def load_template(template_id: str) -> str:
    if template_id not in TEMPLATE_IDS:
        raise KeyError(f"unknown template {template_id!r}")
    return resources.files("recknow").joinpath("templates", f"{template_id}.txt").read_text(encoding="utf-8")


def template_fields(body: str) -> list[str]:
    return sorted({name for _, name, _, _ in string.Formatter().parse(body) if name})


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    user_id: str
    variant: str
    template_id: str
    token_estimate: int
    task: Optional[RankingTask] = None

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict() if self.task is not None else {"user_id": self.user_id},
            "variant": self.variant,
            "template_id": self.template_id,
            "token_estimate": self.token_estimate,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RenderedPrompt":
        task = RankingTask.from_dict(d["task"]) if "candidates" in d["task"] else None
        return cls(d["text"], d["task"]["user_id"], d["variant"], d.get("template_id", d["variant"]),
                   int(d.get("token_estimate", estimate_tokens(d["text"]))), task)


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


def title_list(titles) -> str:
    return "[" + ", ".join(titles) + "]"


def express_i2i(blocks, title: Callable[[str], str], lexicon: str = "movie") -> str:
    lex = LEXICONS[lexicon]
    return "\n".join(
        f"Users who {lex['acted']} {title(anchor)}, their most frequently {lex['acted']} {lex['items']} "
        f"in descending order are: {', '.join(title(i) for i, _ in block)}."
        for anchor, block in blocks
        if block
    )


def express_pairs(blocks, title: Callable[[str], str], lexicon: str = "movie") -> str:
    """One line per globally relevant pair."""
    lex = LEXICONS[lexicon]
    return "\n".join(
        f"{title(a)} and {title(b)} are frequently {lex['acted']} by the same users."
        for a, block in blocks
        for b, _ in block
    )


def express_u2i(items, title: Callable[[str], str]) -> str:
    return ", ".join(title(i) for i, _ in items)


def node_label(node: str, catalog: Optional[ItemCatalog] = None, entity_labels: Optional[dict] = None) -> str:
    kind, rest = node.split(":", 1)
    if kind == "item":
        return catalog.title(rest) if catalog is not None else rest
    if kind == "attr":
        return rest.split(":", 1)[1]
    return (entity_labels or {}).get(rest, rest)


def express_path(path: ReasoningPath, catalog: Optional[ItemCatalog] = None,
                 entity_labels: Optional[dict] = None) -> str:
    """``E1 --> (r1) --> E2 ...`` with merged parallel nodes joined by commas."""
    labels = [node_label(n, catalog, entity_labels) for n in path.nodes]
    if path.merged is not None:
        pos, extra = path.merged
        labels[pos] = ", ".join([labels[pos]] + [node_label(n, catalog, entity_labels) for n in extra])
    parts = [labels[0]]
    for rel, lab in zip(path.relations, labels[1:]):
        parts.append(f"({rel.replace('_', ' ')})")
        parts.append(lab)
    return " --> ".join(parts)


def _title_fn(catalog: Optional[ItemCatalog]) -> Callable[[str], str]:
    if catalog is None:
        return str
    return catalog.title


def _bindings(task: RankingTask, pack: KnowledgePack, catalog, lexicon: str, entity_labels) -> dict[str, str]:
    title = _title_fn(catalog)

    def line(item: str) -> str:
        return pack.attribute_lines.get(item) or title(item)

    out = dict(LEXICONS[lexicon])
    out["n"] = str(len(task.candidates))
    out["history"] = title_list(line(i) for i in task.history)
    out["candidates"] = title_list(line(i) for i in task.candidates)
    v = pack.variant
    if v in _KNOWLEDGE_FIELDS["global_i2i_text"]:
        out["global_i2i_text"] = express_pairs(pack.i2i_blocks, title, lexicon)
    if v in _KNOWLEDGE_FIELDS["his_i2i_text"]:
        out["his_i2i_text"] = express_i2i(pack.i2i_blocks, title, lexicon)
    if v in _KNOWLEDGE_FIELDS["his_cand_i2i_text"]:
        out["his_cand_i2i_text"] = express_i2i(pack.i2i_blocks, title, lexicon)
    if v in _KNOWLEDGE_FIELDS["his_u2i_titles"]:
        out["his_u2i_titles"] = express_u2i(pack.u2i_list, title)
    if v in _KNOWLEDGE_FIELDS["his_cand_u2i_titles"]:
        out["his_cand_u2i_titles"] = express_u2i(pack.u2i_list, title)
    if v in _KNOWLEDGE_FIELDS["path_text"]:
        out["path_text"] = "\n".join(express_path(p, catalog, entity_labels) for p in pack.paths)
    return out


def _drop_oldest_anchor(pack: KnowledgePack) -> Optional[KnowledgePack]:
    if not pack.i2i_blocks:
        return None
    anchor, block = pack.i2i_blocks[0]
    top = block[0][0] if block else None
    paths = [p for p in pack.paths if {p.nodes[0], p.nodes[-1]} != {f"item:{anchor}", f"item:{top}"}]
    return replace(pack, i2i_blocks=pack.i2i_blocks[1:], paths=paths)


def render_prompt(
    task: RankingTask,
    pack: KnowledgePack,
    template_id: Optional[str] = None,
    catalog: Optional[ItemCatalog] = None,
    *,
    lexicon: str = "movie",
    entity_labels: Optional[dict] = None,
    max_tokens: Optional[int] = None,
) -> RenderedPrompt:
    """Fill a template from the task and its knowledge pack.

    With ``max_tokens`` the oldest I2I anchors (and their paths) are dropped
    until the estimate fits or no anchors remain.
    """
    template_id = template_id or pack.variant
    body = load_template(template_id)
    while True:
        values = _bindings(task, pack, catalog, lexicon, entity_labels)
        missing = [f for f in template_fields(body) if f not in values]
        if missing:
            raise MissingPlaceholder(
                f"template {template_id} needs {', '.join(missing)} but the pack is {pack.variant}"
            )
        text = body.format(**values)
        est = estimate_tokens(text)
        if max_tokens is None or est <= max_tokens:
            break
        smaller = _drop_oldest_anchor(pack)
        if smaller is None:
            break
        pack = smaller
    return RenderedPrompt(text, task.user_id, pack.variant, template_id, est, task)


def write_prompts(prompts: list[RenderedPrompt], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in prompts:
            f.write(json.dumps(p.to_dict(), ensure_ascii=False) + "\n")


def read_prompts(path: Union[str, Path]) -> list[RenderedPrompt]:
    with open(path, encoding="utf-8") as f:
        return [RenderedPrompt.from_dict(json.loads(line)) for line in f if line.strip()]
