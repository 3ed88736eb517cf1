"""Fixed-depth parse-tree log template miner.

Messages are tokenised on whitespace, variable-looking tokens are masked to
``<*>``, then routed by token count and the first ``depth - 2`` tokens to a
leaf holding candidate templates. A message joins the most similar template in
its leaf when the similarity reaches ``sim_threshold``; differing positions in
the template are generalised to ``<*>``. Template ids never change once issued.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

WILDCARD = "<*>"
UNSEEN = "<unseen>"
EMPTY = "<empty>"
UNSEEN_ID = 0
EMPTY_ID = 1

DEFAULT_VARIABLE_PATTERNS = (
    r"^[-+]?\d+(\.\d+)?[,;.:]?$",  # plain numbers
    r"^(\d{1,3}\.){3}\d{1,3}(:\d+)?[,;.]?$",  # ipv4[:port]
    r"^0x[0-9a-fA-F]+$",
    r"^[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12}$",
)


def _has_digit(tok: str) -> bool:
    return any(c.isdigit() for c in tok)


@dataclass
class TemplateIndex:
    depth: int = 4
    sim_threshold: float = 0.4
    max_children: int = 100
    variable_patterns: Sequence[str] = DEFAULT_VARIABLE_PATTERNS
    templates: list[list[str]] = field(default_factory=lambda: [[UNSEEN], [EMPTY]])
    _tree: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.depth < 3:
            raise ValueError("depth must be at least 3")
        self._patterns = [re.compile(p) for p in self.variable_patterns]

    @property
    def L(self) -> int:
        return len(self.templates)

    def template(self, event_id: int) -> str:
        return " ".join(self.templates[event_id])

    def tokenize(self, message: str) -> list[str]:
        # every variable pattern needs a digit, so skip the regexes otherwise
        return [WILDCARD if _has_digit(t) and any(p.match(t) for p in self._patterns) else t
                for t in message.split()]

    # tree navigation ------------------------------------------------------------
    def _leaf(self, tokens: list[str], create: bool) -> list[int] | None:
        node = self._tree.get(len(tokens))
        if node is None:
            if not create:
                return None
            node = self._tree[len(tokens)] = {}
        for tok in tokens[: self.depth - 2]:
            key = WILDCARD if _has_digit(tok) else tok
            if key in node:
                node = node[key]
            elif not create:
                if WILDCARD not in node:
                    return None
                node = node[WILDCARD]
            else:
                if len(node) >= self.max_children:
                    key = WILDCARD
                node = node.setdefault(key, {})
        if create:
            return node.setdefault(None, [])
        return node.get(None)

    @staticmethod
    def _similarity(template: list[str], tokens: list[str]) -> tuple[float, int]:
        same = params = 0
        for a, b in zip(template, tokens):
            if a == WILDCARD:
                params += 1
            elif a == b:
                same += 1
        return same / len(tokens), params

    # public API -----------------------------------------------------------------
    def add(self, message: str) -> int:
        """Assign `message` to a template, creating or generalising one as needed."""
        tokens = self.tokenize(message)
        if not tokens:
            return EMPTY_ID
        leaf = self._leaf(tokens, create=True)
        best, best_key = None, (-1.0, -1)
        for tid in leaf:
            key = self._similarity(self.templates[tid], tokens)
            if key > best_key:
                best, best_key = tid, key
        if best is not None and best_key[0] >= self.sim_threshold:
            tmpl = self.templates[best]
            self.templates[best] = [a if a == b else WILDCARD for a, b in zip(tmpl, tokens)]
            return best
        self.templates.append(tokens)
        leaf.append(len(self.templates) - 1)
        return len(self.templates) - 1

    def match(self, message: str) -> int:
        """Frozen lookup: the template this message instantiates, else UNSEEN_ID."""
        tokens = self.tokenize(message)
        if not tokens:
            return EMPTY_ID
        leaf = self._leaf(tokens, create=False)
        if not leaf:
            return UNSEEN_ID
        best, best_key = UNSEEN_ID, (-1.0, -1)
        for tid in leaf:
            tmpl = self.templates[tid]
            if all(a == WILDCARD or a == b for a, b in zip(tmpl, tokens)):
                key = self._similarity(tmpl, tokens)
                if key > best_key:
                    best, best_key = tid, key
        return best

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def dumps(self) -> str:
        return "".join(" ".join(t) + "\n" for t in self.templates)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str, **kwargs) -> "TemplateIndex":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if lines[:2] != [UNSEEN, EMPTY]:
            raise ValueError("template file must start with the reserved <unseen> and <empty> lines")
        index = cls(**kwargs)
        for line in lines[2:]:
            tokens = line.split(" ")
            index.templates.append(tokens)
            index._leaf(tokens, create=True).append(len(index.templates) - 1)
        return index

    @classmethod
    def load(cls, path, **kwargs) -> "TemplateIndex":
        return cls.loads(Path(path).read_text(encoding="utf-8"), **kwargs)


def fit_and_parse(messages: Iterable[tuple[int, str, str]], index: TemplateIndex | None = None
                  ) -> tuple[TemplateIndex, list[tuple[int, str, int]]]:
    """Fit templates over (ts, service, message) triples; returns the index and (ts, service, id) events."""
    index = index or TemplateIndex()
    events = [(ts, service, index.add(msg)) for ts, service, msg in messages]
    return index, events


def parse_with_frozen_index(index: TemplateIndex, message: str) -> int:
    return index.match(message)
