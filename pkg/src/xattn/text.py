"""Report tokenization and rule-based attribute extraction."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import ParseError

EOS = "<eos>"

ATTRIBUTE_WORDS = (
    "left", "right", "lower", "middle", "upper", "lateral",
    "bilateral", "basal", "apical", "aspiration", "small",
    "large", "diffuse", "multifocal", "focal", "effusion",
    "atelectasis", "severe", "acute", "moderate", "positive",
    "uncertain",
)

DISEASE_TERMS = frozenset({"pneumonia", "consolidation", "infiltrate", "opacity"})
NEGATION_CUES = frozenset({"no", "not", "without", "free", "negative", "clear"})

# literal <eos> first so joined token streams re-tokenize to themselves
_TOKEN_RE = re.compile(r"<eos>|\n[^\S\n]*\n|[.!?]|[^\W_]+(?:'[^\W_]+)*")


@dataclass(frozen=True)
class AttributeVocabulary:
    words: tuple[str, ...]
    index: dict[str, int] = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate attribute words")
        if any(w != w.lower() for w in self.words):
            raise ValueError("attribute words must be lowercase")
        object.__setattr__(self, "index", {w: i for i, w in enumerate(self.words)})

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def __iter__(self):
        return iter(self.words)


@dataclass(frozen=True)
class Report:
    id: str
    text: str
    severity: float | None = None


@dataclass(frozen=True)
class AttributeSet:
    present: frozenset[int] = frozenset()

    def __len__(self):
        return len(self.present)

    def indices(self) -> list[int]:
        return sorted(self.present)

    def words(self, vocab: AttributeVocabulary) -> list[str]:
        return [vocab.words[i] for i in self.indices()]

    def target(self, size: int = len(ATTRIBUTE_WORDS)) -> list[int]:
        return [1 if i in self.present else 0 for i in range(size)]

    @classmethod
    def from_words(cls, words: Iterable[str], vocab: AttributeVocabulary) -> "AttributeSet":
        return cls(frozenset(vocab.index[w] for w in words))


_VOCAB = AttributeVocabulary(ATTRIBUTE_WORDS)


def load_vocabulary() -> AttributeVocabulary:
    return _VOCAB


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens with ``EOS`` after each sentence.

    Sentences end at ``.``, ``!``, ``?`` or a blank line; runs of boundaries
    collapse to a single marker and a leading boundary is dropped.
    Punctuation is discarded, so hyphenated words split in two and
    apostrophes are removed from within words.
    """
    tokens: list[str] = []
    for m in _TOKEN_RE.finditer(text.lower()):
        tok = m.group(0)
        if tok == EOS or tok in ".!?" or tok[0] == "\n":
            if tokens and tokens[-1] != EOS:
                tokens.append(EOS)
        else:
            tokens.append(tok.replace("'", ""))
    return tokens


def split_sentences(tokens: list[str]) -> list[list[str]]:
    sentences, cur = [], []
    for tok in tokens:
        if tok == EOS:
            if cur:
                sentences.append(cur)
            cur = []
        else:
            cur.append(tok)
    if cur:
        sentences.append(cur)
    return sentences


def _is_disease(tok: str, terms: frozenset[str]) -> bool:
    if tok in terms:
        return True
    # plural forms: infiltrates, opacities
    if tok.endswith("ies") and tok[:-3] + "y" in terms:
        return True
    return tok.endswith("s") and tok[:-1] in terms


def extract_attributes(report: Report | str, vocab: AttributeVocabulary | None = None,
                       disease_terms: Iterable[str] = DISEASE_TERMS) -> AttributeSet:
    """Attribute words sharing a sentence with an affirmed disease mention.

    A sentence qualifies when it contains a disease term and no negation cue
    appears before that term.  Approximates the rule-based labeler; no
    dependency parsing or scope detection beyond that.
    """
    vocab = vocab or _VOCAB
    terms = frozenset(disease_terms)
    if not terms:
        raise ValueError("disease_terms must be non-empty")
    text = report.text if isinstance(report, Report) else report
    found: set[int] = set()
    for sent in split_sentences(tokenize(text)):
        hits = [i for i, tok in enumerate(sent) if _is_disease(tok, terms)]
        if not hits:
            continue
        if any(tok in NEGATION_CUES for tok in sent[:hits[-1]]):
            continue
        found.update(vocab.index[tok] for tok in sent if tok in vocab.index)
    return AttributeSet(frozenset(found))


def read_reports(path: str | Path) -> Iterator[Report]:
    """Yield reports from a JSONL file of {"id", "text", "severity"?} records."""
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rid, text = str(rec["id"]), rec["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(path, lineno, f"bad report record ({exc})") from None
            if not rid or rid in seen:
                raise ParseError(path, lineno, f"empty or duplicate id {rid!r}")
            seen.add(rid)
            sev = rec.get("severity")
            if sev is not None:
                sev = float(sev)
                if not 0.0 <= sev <= 8.0:
                    raise ParseError(path, lineno, f"severity {sev} outside [0, 8]")
            yield Report(rid, str(text), sev)


def write_reports(path: str | Path, reports: Iterable[Report]) -> None:
    from .io import atomic_write_text

    lines = []
    for r in reports:
        rec = {"id": r.id, "text": r.text}
        if r.severity is not None:
            rec["severity"] = r.severity
        lines.append(json.dumps(rec))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
