"""Synthetic people-search world.

Documents are people with a name, a location and a social community. Many
people share a name, so text alone cannot single out the target: searchers
mostly look for someone in their own community and city. Sessions impress
same-name people, click the target, and occasionally fail (target not
impressed) with a later success on the target.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from ..index import Document
from .features import FeatureRecord
from .mining import Session
from .model import ModelConfig

_SYLLABLES = ["ka", "ri", "to", "mel", "an", "jo", "su", "ben", "li", "mar", "da", "vi",
              "ro", "ne", "sa", "tim", "or", "el", "fa", "gu", "pe", "lo", "zan", "qui"]


@dataclass(frozen=True)
class SyntheticConfig:
    num_docs: int = 2000
    num_first_names: int = 10
    num_last_names: int = 8
    num_names: int = 40
    num_locations: int = 20
    num_communities: int = 50
    social_dim: int = 8
    social_noise: float = 0.5
    group_fraction: float = 0.1
    p_same_community: float = 0.8
    p_same_location: float = 0.7
    typo_rate: float = 0.3
    impressions_per_session: int = 6
    num_train_sessions: int = 4000
    num_eval_sessions: int = 500
    failure_rate: float = 0.04
    seed: int = 0


@dataclass
class Person:
    doc_id: str
    name: str
    location: int
    community: int
    kind: str = "person"


@dataclass
class SyntheticWorld:
    config: SyntheticConfig
    people: list
    community_vecs: np.ndarray
    location_names: list
    rng: np.random.Generator = field(repr=False)

    def doc_features(self, p):
        vec = self.community_vecs[p.community] + self.config.social_noise * self.rng.normal(
            size=self.config.social_dim)
        return FeatureRecord({"name": p.name},
                             {"loc": [(p.location, 1.0)], "social": [(p.community, 1.0)]},
                             {"social_emb": vec})

    def query_features(self, text, location, community):
        vec = self.community_vecs[community] + self.config.social_noise * self.rng.normal(
            size=self.config.social_dim)
        return FeatureRecord({"name": text},
                             {"loc": [(location, 1.0)], "social": [(community, 1.0)]},
                             {"social_emb": vec})


def model_config(cfg, **overrides):
    """Encoder config matching the synthetic feature channels."""
    base = dict(text_fields=("name",),
                categorical=(("loc", cfg.num_locations), ("social", cfg.num_communities)),
                dense=(("social_emb", cfg.social_dim),), word_buckets=2 ** 12)
    base.update(overrides)
    return ModelConfig(**base)


def _word(rng, syllables):
    return "".join(rng.choice(_SYLLABLES, size=syllables))


def typo(text, rng):
    """One random character substitution, insertion or deletion inside a word."""
    chars = list(text)
    pos = [i for i, c in enumerate(chars) if c != " "]
    i = int(rng.choice(pos))
    op = rng.integers(3)
    letter = chr(ord("a") + int(rng.integers(26)))
    if op == 0:
        chars[i] = letter
    elif op == 1:
        chars.insert(i, letter)
    elif len([c for c in chars if c != " "]) > 3:
        del chars[i]
    return "".join(chars)


def make_world(cfg=SyntheticConfig()):
    rng = np.random.default_rng(cfg.seed)
    firsts, lasts = set(), set()
    while len(firsts) < cfg.num_first_names:
        firsts.add(_word(rng, 2))
    while len(lasts) < cfg.num_last_names:
        lasts.add(_word(rng, 3))
    firsts, lasts = sorted(firsts), sorted(lasts)
    combos = [f"{a} {b}" for a in firsts for b in lasts]
    names = [combos[i] for i in sorted(rng.choice(len(combos), size=min(cfg.num_names, len(combos)),
                                                  replace=False))]
    community_vecs = rng.normal(size=(cfg.num_communities, cfg.social_dim))
    community_loc = rng.integers(cfg.num_locations, size=cfg.num_communities)
    people = []
    for i in range(cfg.num_docs):
        comm = int(rng.integers(cfg.num_communities))
        loc = int(community_loc[comm]) if rng.random() < 0.7 else int(rng.integers(cfg.num_locations))
        kind = "group" if rng.random() < cfg.group_fraction else "person"
        people.append(Person(f"doc{i:05d}", str(rng.choice(names)), loc, comm, kind))
    locs = [f"city{j:02d}" for j in range(cfg.num_locations)]
    return SyntheticWorld(cfg, people, community_vecs, locs, rng)


def corpus_documents(world):
    """Index documents with terms and the document-side feature record."""
    docs = []
    for p in world.people:
        terms = {f"text:{w}": None for w in p.name.split()}
        terms[f"location:{world.location_names[p.location]}"] = None
        terms[f"type:{p.kind}"] = None
        docs.append(Document(p.doc_id, terms, {}, world.doc_features(p).to_json()))
    return docs


def _searcher(world, target):
    cfg, rng = world.config, world.rng
    comm = target.community if rng.random() < cfg.p_same_community else int(
        rng.integers(cfg.num_communities))
    loc = target.location if rng.random() < cfg.p_same_location else int(
        rng.integers(cfg.num_locations))
    text = typo(target.name, rng) if rng.random() < cfg.typo_rate else target.name
    return world.query_features(text, loc, comm)


def make_sessions(world, n, failure_rate=None):
    """Simulated search sessions (JSON-able Session objects)."""
    cfg, rng = world.config, world.rng
    failure_rate = cfg.failure_rate if failure_rate is None else failure_rate
    by_name = {}
    for idx, p in enumerate(world.people):
        by_name.setdefault(p.name, []).append(idx)
    out = []
    for _ in range(n):
        t = world.people[int(rng.integers(len(world.people)))]
        query = _searcher(world, t)
        same = [world.people[i].doc_id for i in by_name[t.name] if world.people[i].doc_id != t.doc_id]
        k = min(len(same), cfg.impressions_per_session - 1)
        others = [same[i] for i in rng.choice(len(same), size=k, replace=False)] if k else []
        if rng.random() < failure_rate:
            out.append(Session(query, others, [], t.doc_id))
        else:
            shown = others + [t.doc_id]
            order = rng.permutation(len(shown))
            out.append(Session(query, [shown[i] for i in order], [t.doc_id], None))
    return out


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def planted_fuzzy_pair(world, first="john", last="smith", misspelled="smithe"):
    """Add a ``john smith`` person and return ``(document, query_record)``.

    The query text is the misspelling, with searcher features matching the
    planted person, so only fuzzy matching can reach it.
    """
    p = Person(f"planted-{first}-{last}", f"{first} {last}", 0, 0)
    world.people.append(p)
    terms = {f"text:{first}": None, f"text:{last}": None,
             f"location:{world.location_names[0]}": None, "type:person": None}
    doc = Document(p.doc_id, terms, {}, world.doc_features(p).to_json())
    return doc, world.query_features(f"{first} {misspelled}", 0, 0)
