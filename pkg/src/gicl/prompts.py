"""Prompt templates, answer parsing, and ICL-set post-processing.

A template file is UTF-8 text with three sections separated by lines
containing only ``---``: the main template (placeholders ``{examples}``
and ``{query}``, each exactly once), the per-example sub-template
(``{text}`` and ``{label}``), and the answer cue appended to every prompt.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence


class IclExample(NamedTuple):
    text: str
    label: str


@dataclass(frozen=True)
class PromptTemplate:
    main: str
    example: str
    answer_cue: str

    def __post_init__(self) -> None:
        for ph in ("{examples}", "{query}"):
            if self.main.count(ph) != 1:
                raise ValueError(f"main template must contain {ph} exactly once")
        for ph in ("{text}", "{label}"):
            if ph not in self.example:
                raise ValueError(f"example sub-template must contain {ph}")

    @property
    def template_hash(self) -> str:
        payload = "\x00".join((self.main, self.example, self.answer_cue))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


DEFAULT_TEMPLATE = PromptTemplate(
    main=(
        "You are an AI trained to categorize documents into specific categories. "
        "Your task is to analyze the document provided and identify the most "
        "relevant category.\n"
        "Document: {query}\n"
        "Give me the category of this document. Respond only with the category "
        "key, without any additional text or explanation. Here are some labeled "
        "example documents to help you:\n"
        "{examples}\n"
    ),
    example="Document: {text}\nCategory: {label}\n",
    answer_cue="\nAnswer:",
)


def load_template(name_or_path: str | Path) -> PromptTemplate:
    """Load a template by bundled name (e.g. 'arxiv') or filesystem path."""
    path = Path(name_or_path)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
    else:
        ref = resources.files("gicl").joinpath(f"templates/{name_or_path}.tmpl")
        if not ref.is_file():
            raise FileNotFoundError(f"no template file or bundled template named {name_or_path!r}")
        text = ref.read_text(encoding="utf-8")
    parts = re.split(r"^---\s*$", text, flags=re.MULTILINE)
    if len(parts) != 3:
        raise ValueError(f"template {name_or_path!r} must have 3 sections separated by '---' lines")
    main, example, cue = (p.strip("\n") for p in parts)
    return PromptTemplate(main=main, example=example, answer_cue=cue)


def truncate_at_whitespace(text: str, limit: int) -> str:
    """Clip to at most ``limit`` chars, cutting at a whitespace boundary."""
    if limit <= 0 or len(text) <= limit:
        return text
    head = text[:limit]
    if not text[limit].isspace():
        cut = max(head.rfind(ch) for ch in (" ", "\t", "\n"))
        if cut > 0:
            head = head[:cut]
    return head.rstrip()


def render(
    template: PromptTemplate,
    examples: Sequence[IclExample | tuple[str, str]],
    query_text: str,
    max_chars_per_doc: int = 1200,
    max_chars_total: int | None = None,
) -> str:
    """Fill the template: examples in given (rank) order, then the answer cue.

    Each document is truncated to ``max_chars_per_doc`` at a whitespace
    boundary. When ``max_chars_total`` is set and exceeded, lowest-ranked
    examples are dropped first until the prompt fits.
    """
    query = truncate_at_whitespace(query_text, max_chars_per_doc)

    def build(n_examples: int) -> str:
        blocks = [
            template.example.replace(
                "{text}", truncate_at_whitespace(str(text), max_chars_per_doc)
            ).replace("{label}", str(label))
            for text, label in examples[:n_examples]
        ]
        body = template.main.replace("{examples}", "".join(blocks)).replace("{query}", query)
        return body + template.answer_cue

    n = len(examples)
    prompt = build(n)
    if max_chars_total is not None:
        while n > 0 and len(prompt) > max_chars_total:
            n -= 1
            prompt = build(n)
    return prompt


def parse_answer(completion_text: str, label_vocab: Sequence[str]) -> int | None:
    """Earliest case-insensitive vocabulary match; longest label wins ties.

    Returns the class index, or None when no label occurs in the text.
    """
    haystack = completion_text.lower()
    best: tuple[int, int, int] | None = None  # (position, -len, class index)
    for idx, label in enumerate(label_vocab):
        pos = haystack.find(label.lower())
        if pos < 0:
            continue
        key = (pos, -len(label), idx)
        if best is None or key < best:
            best = key
    return best[2] if best is not None else None


def majority_vote(examples: Sequence[IclExample | tuple[str, str]]) -> str:
    """Most frequent label; ties go to the highest-ranked tied example."""
    if not examples:
        raise ValueError("majority_vote needs at least one example")
    counts: dict[str, int] = {}
    first_rank: dict[str, int] = {}
    for rank, (_, label) in enumerate(examples):
        counts[label] = counts.get(label, 0) + 1
        first_rank.setdefault(label, rank)
    return max(counts, key=lambda lab: (counts[lab], -first_rank[lab]))


def purify_minority(
    examples: Sequence[IclExample | tuple[str, str]], min_count: int = 2
) -> list[IclExample | tuple[str, str]]:
    """Drop examples whose label appears fewer than min_count times.

    If that would remove everything, the input is returned unchanged.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: dict[str, int] = {}
    for _, label in examples:
        counts[label] = counts.get(label, 0) + 1
    kept = [ex for ex in examples if counts[ex[1]] >= min_count]
    return kept if kept else list(examples)


SELECTION_PROMPT = (
    "You are selecting the most informative examples for a classification "
    "task. Below is a numbered list of candidate examples. Pick the {budget} "
    "most relevant and diverse ones.\n{candidates}\n"
    "Respond only with the numbers of your picks, comma-separated "
    "(e.g., 2,5,1), without any additional text.\nAnswer:"
)


def purify_llm_select(
    examples: Sequence[IclExample | tuple[str, str]],
    complete_fn,
    budget: int,
) -> tuple[list[IclExample | tuple[str, str]], bool]:
    """Ask the model to pick ``budget`` examples; fall back to original rank.

    ``complete_fn(prompt) -> str`` issues the selection request. Returns the
    selected examples and a flag set when the fallback was used (unparseable
    reply or scorer failure).
    """
    if budget > len(examples):
        raise ValueError("budget cannot exceed the number of examples")
    if budget == len(examples):
        return list(examples), False
    lines = "\n".join(
        f"{i + 1}. {truncate_at_whitespace(str(text), 200)} -> {label}"
        for i, (text, label) in enumerate(examples)
    )
    prompt = SELECTION_PROMPT.format(budget=budget, candidates=lines)
    try:
        reply = complete_fn(prompt)
    except Exception:
        return list(examples[:budget]), True
    picks: list[int] = []
    for token in re.findall(r"\d+", reply):
        i = int(token) - 1
        if 0 <= i < len(examples) and i not in picks:
            picks.append(i)
        if len(picks) == budget:
            break
    if not picks:
        return list(examples[:budget]), True
    return [examples[i] for i in picks], False
