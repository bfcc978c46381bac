"""Event logs, sessionization, query blocks and the synthetic log generator."""
from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
from scipy.special import expit, logit

logger = logging.getLogger(__name__)

HOUR_MS = 3_600_000
EVENT_KINDS = ("query", "presentation", "click", "view", "purchase")
_KIND_ORDER = {k: i for i, k in enumerate(EVENT_KINDS)}
ACTION_KINDS = ("click", "view", "purchase")
MAX_MALFORMED_FRACTION = 0.10


class DataError(ValueError):
    """Input data cannot be turned into a usable dataset."""


@dataclass(frozen=True)
class Event:
    timestamp: int
    kind: str
    user_hash: str | None = None
    session_key: str | None = None
    query_id: str | None = None
    item_id: str | None = None
    shown_items: tuple = ()
    is_queryless: bool = False

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.kind in ("query", "presentation") and self.query_id is None:
            raise ValueError(f"{self.kind} event without query_id")
        if self.kind == "presentation" and not self.shown_items:
            raise ValueError("presentation event with empty shown_items")
        if self.kind in ACTION_KINDS and self.item_id is None:
            raise ValueError(f"{self.kind} event without item_id")

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        def opt_str(key):
            v = d.get(key)
            return None if v is None else str(v)

        ts = d["timestamp"]
        if isinstance(ts, bool) or not isinstance(ts, (int, float)) or ts != int(ts):
            raise ValueError(f"bad timestamp {ts!r}")
        return cls(
            timestamp=int(ts),
            kind=d["kind"],
            user_hash=opt_str("user_hash"),
            session_key=opt_str("session_key"),
            query_id=opt_str("query_id"),
            item_id=opt_str("item_id"),
            shown_items=tuple(str(i) for i in d.get("shown_items") or ()),
            is_queryless=bool(d.get("is_queryless", False)),
        )

    def to_dict(self) -> dict:
        d = {"timestamp": self.timestamp, "kind": self.kind}
        for key in ("user_hash", "session_key", "query_id", "item_id"):
            v = getattr(self, key)
            if v is not None:
                d[key] = v
        if self.shown_items:
            d["shown_items"] = list(self.shown_items)
        if self.kind == "query":
            d["is_queryless"] = self.is_queryless
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def group_key(self) -> str:
        """Per-user grouping key; anonymous events fall back to their session key."""
        if self.user_hash is not None:
            return "u:" + self.user_hash
        return "a:" + (self.session_key or "")


def _sort_key(e: Event):
    return (e.group_key, e.timestamp, _KIND_ORDER[e.kind], e.to_json())


@dataclass(frozen=True)
class QueryBlock:
    session_id: str
    query_id: str
    timestamp: int
    shown_items: tuple
    labels: tuple
    preceding_clicks: tuple = ()
    preceding_views: tuple = ()
    preceding_purchases: tuple = ()
    user: str | None = None
    is_queryless: bool = True

    def __post_init__(self):
        if len(self.labels) != len(self.shown_items):
            raise ValueError("labels must align with shown_items")


@dataclass
class Session:
    session_id: str
    events: list
    queries: list = field(default_factory=list)
    dropped_actions: int = 0

    @property
    def user(self) -> str | None:
        return self.events[0].user_hash if self.events else None


def parse_events(lines: Iterable[str]) -> list[Event]:
    """Parse JSONL lines into events sorted by (user, timestamp).

    Malformed lines are skipped with a warning; more than 10% malformed is fatal.
    """
    events, bad, total = [], 0, 0
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        total += 1
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("not a JSON object")
            events.append(Event.from_dict(obj))
        except (ValueError, KeyError, TypeError) as exc:
            bad += 1
            logger.warning("skipping malformed line %d: %s", lineno, exc)
    if total and bad / total > MAX_MALFORMED_FRACTION:
        raise DataError(f"{bad} of {total} lines malformed (limit 10%)")
    events.sort(key=_sort_key)
    return events


def write_events(events: Iterable[Event], fh) -> None:
    for e in events:
        fh.write(e.to_json())
        fh.write("\n")


def _session_id(first: Event) -> str:
    digest = hashlib.sha1((first.group_key + "|" + first.to_json()).encode("utf-8"))
    return digest.hexdigest()[:16]


def sessionize(events: Iterable[Event], gap_ms: int = HOUR_MS) -> list[Session]:
    """Split each user's events wherever the inactivity gap is >= ``gap_ms``."""
    ordered = sorted(events, key=_sort_key)
    sessions, current, prev = [], [], None
    for e in ordered:
        if prev is not None and (
            e.group_key != prev.group_key or e.timestamp - prev.timestamp >= gap_ms
        ):
            sessions.append(current)
            current = []
        current.append(e)
        prev = e
    if current:
        sessions.append(current)
    return [_build_session(evs) for evs in sessions]


def _build_session(events: list[Event]) -> Session:
    sid = _session_id(events[0])
    queryless = {e.query_id: e.is_queryless for e in events if e.kind == "query"}
    presentations = []  # [event, clicked set, purchased set, history snapshot]
    history = {k: [] for k in ACTION_KINDS}  # (timestamp, item)
    dropped = 0
    for e in events:
        if e.kind == "presentation":
            before = {
                k: tuple(i for t, i in history[k] if t < e.timestamp) for k in ACTION_KINDS
            }
            presentations.append([e, set(), set(), before])
        elif e.kind in ACTION_KINDS:
            target = None
            for p in reversed(presentations):
                if e.item_id in p[0].shown_items and (
                    e.query_id is None or e.query_id == p[0].query_id
                ):
                    target = p
                    break
            if target is None:
                dropped += 1
                logger.warning(
                    "dropping %s of never-presented item %s in session %s",
                    e.kind, e.item_id, sid,
                )
                continue
            if e.kind == "click":
                target[1].add(e.item_id)
            elif e.kind == "purchase":
                target[2].add(e.item_id)
            history[e.kind].append((e.timestamp, e.item_id))
    blocks = []
    for pres, clicked, purchased, before in presentations:
        labels = tuple(
            2 if i in purchased else 1 if i in clicked else 0 for i in pres.shown_items
        )
        blocks.append(
            QueryBlock(
                session_id=sid,
                query_id=pres.query_id,
                timestamp=pres.timestamp,
                shown_items=pres.shown_items,
                labels=labels,
                preceding_clicks=before["click"],
                preceding_views=before["view"],
                preceding_purchases=before["purchase"],
                user=pres.user_hash,
                is_queryless=queryless.get(pres.query_id, False),
            )
        )
    return Session(sid, events, blocks, dropped)


@dataclass
class Dataset:
    train: list
    test: list
    item_vocab: list
    user_vocab: list
    stats: dict = field(default_factory=dict)

    @property
    def blocks(self) -> list:
        return self.train + self.test


def prepare_dataset(sessions: list[Session], min_queries: int = 2) -> Dataset:
    """Keep all-query-less sessions with >= ``min_queries`` blocks; last block is test."""
    kept, reasons = [], Counter()
    for s in sessions:
        if len(s.queries) < min_queries:
            reasons["too_few_queries"] += 1
        elif not all(b.is_queryless for b in s.queries):
            reasons["has_text_query"] += 1
        else:
            kept.append(s)
    if not kept:
        raise DataError(
            f"no sessions retained out of {len(sessions)} "
            f"(too_few_queries={reasons['too_few_queries']}, "
            f"has_text_query={reasons['has_text_query']})"
        )
    train, test = [], []
    for s in kept:
        train.extend(s.queries[:-1])
        test.append(s.queries[-1])
    items, users = set(), set()
    for b in train + test:
        items.update(b.shown_items)
        items.update(b.preceding_clicks + b.preceding_views + b.preceding_purchases)
        if b.user is not None:
            users.add(b.user)
    action_counts = Counter(
        e.kind for s in kept for e in s.events if e.kind in ACTION_KINDS
    )
    action_counts["dropped"] = sum(s.dropped_actions for s in kept)
    ds = Dataset(train, test, sorted(items), sorted(users))
    ds.stats = dataset_stats(ds, action_counts, n_sessions=len(kept))
    ds.stats["sessions_dropped"] = len(sessions) - len(kept)
    return ds


STAT_ROWS = (
    ("users", "#users"),
    ("sessions", "#sessions"),
    ("queryless_queries", "#query-less queries"),
    ("presented_products", "#presented products"),
    ("click_logs", "#click logs"),
    ("view_logs", "#view logs"),
    ("purchase_records", "#purchase records"),
    ("avg_shown_per_query", "#avg.(show items) per query"),
)


def dataset_stats(dataset: Dataset, action_counts=None, n_sessions=None) -> dict:
    """Corpus statistics in the row order of the classic dataset summary table.

    Action counts are the attributed click/view/purchase events of retained
    sessions; without them the counts fall back to label tallies.
    """
    blocks = dataset.blocks
    labels = Counter(y for b in blocks for y in b.labels)
    if action_counts is None:
        action_counts = {"click": labels[1] + labels[2], "purchase": labels[2]}
    n_shown = sum(len(b.shown_items) for b in blocks)
    stats = {
        "users": len({b.user for b in blocks if b.user is not None}),
        "sessions": n_sessions if n_sessions is not None else len({b.session_id for b in blocks}),
        "queryless_queries": len(blocks),
        "presented_products": len({i for b in blocks for i in b.shown_items}),
        "click_logs": int(action_counts.get("click", 0)),
        "view_logs": int(action_counts.get("view", 0)),
        "purchase_records": int(action_counts.get("purchase", 0)),
        "avg_shown_per_query": n_shown / len(blocks) if blocks else 0.0,
        "label_counts": {str(k): labels.get(k, 0) for k in (0, 1, 2)},
        "train_queries": len(dataset.train),
        "test_queries": len(dataset.test),
    }
    return stats


def format_stats(stats: dict) -> str:
    width = max(len(label) for _, label in STAT_ROWS)
    lines = [f"{'Statistics':<{width}}  Value"]
    for key, label in STAT_ROWS:
        v = stats.get(key, 0)
        v = f"{v:.1f}" if isinstance(v, float) else f"{v:,}"
        lines.append(f"{label:<{width}}  {v}")
    return "\n".join(lines)


@dataclass
class SyntheticConfig:
    n_users: int = 250
    n_items: int = 200
    n_categories: int = 10
    sessions_per_user: int = 4
    queries_per_session: int = 4
    list_length: int = 20
    intent_fraction: float = 0.3
    intent_click_prob: float = 0.5
    noise_click_prob: float = 0.05
    purchase_prob: float = 0.3
    view_prob: float = 0.3
    view_noise_prob: float = 0.02
    anonymous_fraction: float = 0.0
    queryless_fraction: float = 1.0
    appeal_scale: float = 0.0

    def validate(self):
        for name in (
            "intent_fraction", "intent_click_prob", "noise_click_prob", "purchase_prob",
            "view_prob", "view_noise_prob", "anonymous_fraction", "queryless_fraction",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a probability")
        if self.appeal_scale < 0:
            raise ValueError("appeal_scale must be >= 0")
        if self.queries_per_session < 2:
            raise ValueError("queries_per_session must be >= 2")
        if self.list_length > self.n_items:
            raise ValueError("list_length exceeds n_items")
        if min(self.n_users, self.n_items, self.n_categories, self.sessions_per_user,
               self.list_length) < 1:
            raise ValueError("sizes must be positive")
        return self


@dataclass
class SyntheticCorpus:
    events: list
    item_category: dict
    query_intent: dict
    counts: Counter
    item_appeal: dict = field(default_factory=dict)


def simulate(config: SyntheticConfig, seed) -> SyntheticCorpus:
    """Generate a seeded event log plus its ground truth and bookkeeping.

    Each session draws one intent category that persists across its queries.
    Shown lists mix intent-category items with uniform random ones; clicks,
    purchases and views are then drawn item by item.  Views land on unclicked
    shown items that share a category with a clicked item (its neighbours),
    plus a small uniform noise rate.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    n_items, n_cat = config.n_items, config.n_categories
    item_ids = [f"i{j:04d}" for j in range(n_items)]
    cats = rng.permutation(np.arange(n_items) % n_cat)
    item_category = {item_ids[j]: int(cats[j]) for j in range(n_items)}
    by_cat = [np.flatnonzero(cats == c) for c in range(n_cat)]
    # drawn only when enabled so appeal-free corpora keep their random stream
    appeal = (rng.normal(scale=config.appeal_scale, size=n_items) if config.appeal_scale > 0
              else None)

    events, counts = [], Counter()
    query_intent = {}
    qcount = scount = 0
    for u in range(config.n_users):
        anonymous = rng.random() < config.anonymous_fraction
        user = None if anonymous else f"u{u:04d}"
        t = int(rng.integers(0, 30 * 24)) * HOUR_MS
        for _ in range(config.sessions_per_user):
            t += int(rng.integers(2 * HOUR_MS, 48 * HOUR_MS))
            skey = f"s{scount:06d}"
            scount += 1
            counts["sessions"] += 1
            if user is not None:
                counts["known_user_sessions"] += 1
            intent = int(rng.integers(n_cat))
            queryless = rng.random() < config.queryless_fraction

            def emit(kind, **kw):
                ev = Event(timestamp=t, kind=kind, user_hash=user,
                           session_key=None if user else skey, **kw)
                events.append(ev)
                counts[kind] += 1

            for _ in range(config.queries_per_session):
                qid = f"q{qcount:07d}"
                qcount += 1
                query_intent[qid] = intent
                t += int(rng.integers(30_000, 600_000))
                emit("query", query_id=qid, is_queryless=queryless)
                shown = _draw_list(rng, config, by_cat[intent], n_items)
                t += 1
                emit("presentation", query_id=qid,
                     shown_items=tuple(item_ids[j] for j in shown))
                counts["shown"] += len(shown)
                is_intent = cats[shown] == intent
                counts["intent_impressions"] += int(is_intent.sum())
                p_click = np.where(is_intent, config.intent_click_prob, config.noise_click_prob)
                p_buy = np.full(len(shown), config.purchase_prob)
                if appeal is not None:
                    p_click = expit(logit(p_click) + appeal[shown])
                    p_buy = expit(logit(p_buy) + appeal[shown])
                clicked = rng.random(len(shown)) < p_click
                bought = clicked & (rng.random(len(shown)) < p_buy)
                counts["intent_clicks"] += int((clicked & is_intent).sum())
                clicked_cats = set(cats[shown[clicked]].tolist())
                neighbour = np.array([c in clicked_cats for c in cats[shown]], dtype=bool)
                p_view = np.where(neighbour, config.view_prob, config.view_noise_prob)
                viewed = ~clicked & (rng.random(len(shown)) < p_view)
                for pos in range(len(shown)):
                    item = item_ids[shown[pos]]
                    if clicked[pos]:
                        t += int(rng.integers(1_000, 120_000))
                        emit("click", query_id=qid, item_id=item)
                        if bought[pos]:
                            t += int(rng.integers(1_000, 120_000))
                            emit("purchase", query_id=qid, item_id=item)
                    elif viewed[pos]:
                        t += int(rng.integers(1_000, 120_000))
                        emit("view", query_id=qid, item_id=item)
                    counts[f"label_{2 if bought[pos] else 1 if clicked[pos] else 0}"] += 1
    events.sort(key=_sort_key)
    return SyntheticCorpus(events, item_category, query_intent, counts,
                           {} if appeal is None else dict(zip(item_ids, appeal.tolist())))


def _draw_list(rng, config, intent_items, n_items):
    n = config.list_length
    n_intent = min(rng.binomial(n, config.intent_fraction), len(intent_items))
    chosen = list(rng.choice(intent_items, size=n_intent, replace=False))
    taken = set(chosen)
    others = [j for j in rng.permutation(n_items) if j not in taken]
    chosen.extend(others[: n - n_intent])
    return np.asarray(rng.permutation(chosen), dtype=np.intp)


def generate_synthetic(config: SyntheticConfig, seed) -> list[Event]:
    return simulate(config, seed).events


def synthetic_config_dict(config: SyntheticConfig) -> dict:
    return asdict(config)
