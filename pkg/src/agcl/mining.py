"""Rule-based extraction of (disease, severity) attributes from report text.

A severity adjective attaches to the nearest disease keyword inside the same
sentence; a mention is negated when a negation cue precedes the keyword in
that sentence. Negated mentions never contribute a severity label.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

SEVERITIES = ("mild", "moderate", "severe")
SEVERITY_RANK = {name: rank for rank, name in enumerate(SEVERITIES)}

DEFAULT_CLUSTERS = {
    "mild": ("minimal", "tiny", "small", "mild"),
    "moderate": ("middle-size", "moderate"),
    "severe": ("remarkable", "large", "severe"),
}
DEFAULT_NEGATION_CUES = ("no", "not", "without", "free of", "negative for", "absence of")

_TOKEN_RE = re.compile(r"[a-z][a-z-]*")
_SENTENCE_RE = re.compile(r"[.!?]+")


@dataclass(frozen=True)
class Mention:
    disease: str
    severity_term: str | None
    cluster: str | None
    negated: bool
    sentence_index: int


@dataclass(frozen=True)
class Lexicon:
    clusters: dict[str, tuple[str, ...]]
    keywords: dict[str, tuple[str, ...]]
    negation_cues: tuple[str, ...] = DEFAULT_NEGATION_CUES

    def __post_init__(self):
        seen: dict[str, str] = {}
        for cluster, terms in self.clusters.items():
            if cluster not in SEVERITIES:
                raise ValueError(f"unknown severity cluster '{cluster}'")
            for term in terms:
                if term in seen:
                    raise ValueError(f"adjective '{term}' appears in both '{seen[term]}' and '{cluster}'")
                seen[term] = cluster

    def term_cluster(self) -> dict[str, str]:
        return {term: cluster for cluster, terms in self.clusters.items() for term in terms}

    def token_disease(self) -> dict[str, str]:
        return {tok: disease for disease, toks in self.keywords.items() for tok in toks}

    @classmethod
    def default(cls, diseases) -> "Lexicon":
        return cls(clusters=dict(DEFAULT_CLUSTERS), keywords={d: (d,) for d in diseases})

    @classmethod
    def from_json(cls, path) -> "Lexicon":
        with open(path) as fh:
            raw = json.load(fh)
        return cls(
            clusters={k: tuple(v) for k, v in raw["clusters"].items()},
            keywords={k: tuple(v) for k, v in raw["keywords"].items()},
            negation_cues=tuple(raw.get("negation_cues", DEFAULT_NEGATION_CUES)),
        )

    def to_json(self, path) -> None:
        payload = {
            "clusters": {k: list(v) for k, v in self.clusters.items()},
            "keywords": {k: list(v) for k, v in self.keywords.items()},
            "negation_cues": list(self.negation_cues),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _tokenize(sentence: str) -> list[str]:
    return _TOKEN_RE.findall(sentence.lower())


def _cue_positions(tokens: list[str], cues) -> list[int]:
    positions = []
    for cue in cues:
        cue_toks = cue.split()
        for i in range(len(tokens) - len(cue_toks) + 1):
            if tokens[i : i + len(cue_toks)] == cue_toks:
                positions.append(i)
    return positions


def parse_report(text: str, lexicon: Lexicon) -> list[Mention]:
    """Mentions found in `text`; unknown words are ignored, zero mentions is valid."""
    if not text:
        raise ValueError("empty report text")
    term_cluster = lexicon.term_cluster()
    token_disease = lexicon.token_disease()
    mentions: list[Mention] = []
    for s_idx, sentence in enumerate(s for s in _SENTENCE_RE.split(text) if s.strip()):
        tokens = _tokenize(sentence)
        cue_starts = _cue_positions(tokens, lexicon.negation_cues)
        keyword_hits = [(i, token_disease[t]) for i, t in enumerate(tokens) if t in token_disease]
        if not keyword_hits:
            continue
        negated = {i: any(c < i for c in cue_starts) for i, _ in keyword_hits}
        claimed: set[int] = set()
        for j, tok in enumerate(tokens):
            cluster = term_cluster.get(tok)
            if cluster is None:
                continue
            # nearest keyword by token distance, leftmost on ties
            i, disease = min(keyword_hits, key=lambda hit: (abs(hit[0] - j), hit[0]))
            claimed.add(i)
            mentions.append(Mention(disease, tok, cluster, negated[i], s_idx))
        for i, disease in keyword_hits:
            if i not in claimed:
                mentions.append(Mention(disease, None, None, negated[i], s_idx))
    return mentions


def assign_dsl(mentions) -> dict[str, str]:
    """Per-disease maximum severity over the non-negated mentions."""
    dsl: dict[str, str] = {}
    for m in mentions:
        if m.negated or m.cluster is None:
            continue
        if m.disease not in dsl or SEVERITY_RANK[m.cluster] > SEVERITY_RANK[dsl[m.disease]]:
            dsl[m.disease] = m.cluster
    return dsl


def mine_manifest(records, lexicon: Lexicon) -> list[dict]:
    """DSL maps for an iterable of manifest records carrying 'id' and 'report'."""
    out = []
    for rec in records:
        report = rec.get("report")
        dsl = assign_dsl(parse_report(report, lexicon)) if report else {}
        out.append({"id": rec["id"], "dsl": dsl})
    return out
