"""Protocol TVL ingestion: API client, response cache, category aggregation.

Offline-first: every fetched body lands in a content-addressed cache keyed by
the request URL, and every fetch consults that cache when the network is
unavailable. Downstream modules only ever see snapshots, so a warm cache (or
a committed snapshot) is enough to run the whole pipeline with no network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DataError, IngestError, MissingProtocolError, ValidationError
from .panel import CategoryPanel

log = logging.getLogger(__name__)

DEFAULT_API_BASE = "https://api.llama.fi"
DEFAULT_EXCLUSIONS = frozenset({"CEX", "Chain"})
DEFAULT_MIN_INTERVAL = 0.25  # seconds between requests


@dataclass
class ProtocolHeader:
    slug: str
    category: str


@dataclass
class ProtocolRecord:
    """One protocol's daily TVL history.

    ``tvl_series`` holds (UTC day, USD) pairs with strictly increasing dates
    and nonnegative values; both are enforced at construction.
    """

    slug: str
    category: str
    tvl_series: list[tuple[pd.Timestamp, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.category:
            raise ValidationError(f"protocol {self.slug!r}: empty category")
        prev = None
        for d, v in self.tvl_series:
            if prev is not None and d <= prev:
                raise ValidationError(f"protocol {self.slug!r}: dates not strictly increasing")
            if v < 0:
                raise DataError(f"protocol {self.slug!r}: negative TVL {v} on {d.date()}")
            prev = d

    def as_series(self) -> pd.Series:
        idx = pd.DatetimeIndex([d for d, _ in self.tvl_series])
        return pd.Series([v for _, v in self.tvl_series], index=idx, dtype=np.float64)


class RateLimiter:
    """Enforces a minimum wall-clock interval between successive calls."""

    def __init__(self, min_interval: float = DEFAULT_MIN_INTERVAL):
        self.min_interval = float(min_interval)
        self._last = None

    def wait(self) -> None:
        now = time.monotonic()
        if self._last is not None:
            rem = self.min_interval - (now - self._last)
            if rem > 0:
                time.sleep(rem)
                now = time.monotonic()
        self._last = now


class ResponseCache:
    """Content-addressed byte cache, one file per URL.

    Writes go through a temp file + atomic rename, so concurrent writers of
    distinct keys never corrupt each other and a torn write is impossible.
    """

    def __init__(self, cache_dir):
        self.cache_dir = str(cache_dir)
        os.makedirs(self.cache_dir, exist_ok=True)

    def _key(self, url: str) -> str:
        return hashlib.sha256(url.encode("utf-8")).hexdigest()

    def _paths(self, url: str) -> tuple[str, str]:
        k = self._key(url)
        return (
            os.path.join(self.cache_dir, k + ".bin"),
            os.path.join(self.cache_dir, k + ".meta.json"),
        )

    def get(self, url: str) -> bytes | None:
        body_path, _ = self._paths(url)
        try:
            with open(body_path, "rb") as fh:
                return fh.read()
        except FileNotFoundError:
            return None

    def put(self, url: str, body: bytes) -> None:
        body_path, meta_path = self._paths(url)
        meta = {"url": url, "fetched_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
        for path, payload in ((body_path, body), (meta_path, json.dumps(meta).encode())):
            fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(payload)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise


class LlamaClient:
    """Client for a DeFiLlama-compatible TVL API.

    ``session`` only needs ``.get(url, timeout=...)`` returning an object
    with ``status_code`` and ``content``; tests inject fakes. ``offline=True``
    skips the network entirely and serves from cache alone.
    """

    def __init__(
        self,
        api_base: str = DEFAULT_API_BASE,
        cache_dir=None,
        session=None,
        min_interval: float = DEFAULT_MIN_INTERVAL,
        offline: bool = False,
        timeout: float = 30.0,
    ):
        self.api_base = api_base.rstrip("/")
        self.cache = ResponseCache(cache_dir) if cache_dir is not None else None
        self._session = session
        self._limiter = RateLimiter(min_interval)
        self.offline = offline
        self.timeout = timeout
        self.diagnostics: list[str] = []

    def _ensure_session(self):
        if self._session is None:
            import requests

            self._session = requests.Session()
        return self._session

    def _get(self, path: str) -> tuple[bytes, bool]:
        """Fetch a path, returning (body, served_stale_from_cache)."""
        url = self.api_base + path
        if self.offline:
            if self.cache is None:
                raise IngestError(f"offline mode with no cache directory for {url}")
            body = self.cache.get(url)
            if body is None:
                raise IngestError(f"offline mode and no cached response for {url}")
            return body, False

        try:
            self._limiter.wait()
            resp = self._ensure_session().get(url, timeout=self.timeout)
        except Exception as exc:
            cached = self.cache.get(url) if self.cache is not None else None
            if cached is not None:
                log.warning("network failure for %s, serving stale cache: %s", url, exc)
                return cached, True
            raise IngestError(f"network failure for {url} with empty cache: {exc}") from exc

        if resp.status_code == 404:
            raise MissingProtocolError(f"upstream returned 404 for {url}", slug=path.rsplit("/", 1)[-1])
        if resp.status_code != 200:
            cached = self.cache.get(url) if self.cache is not None else None
            if cached is not None:
                log.warning("HTTP %s for %s, serving stale cache", resp.status_code, url)
                return cached, True
            raise IngestError(f"HTTP {resp.status_code} for {url} with empty cache")

        body = resp.content
        if self.cache is not None:
            self.cache.put(url, body)
        return body, False

    # -- listing ------------------------------------------------------------

    def protocol_list(self) -> list[ProtocolHeader]:
        body, stale = self._get("/v2/protocols")
        try:
            raw = json.loads(body)
        except json.JSONDecodeError as exc:
            raise IngestError(f"protocol listing is not valid JSON: {exc}") from exc
        if not isinstance(raw, list):
            raise IngestError("protocol listing: expected a JSON array of protocol objects")

        headers: list[ProtocolHeader] = []
        seen: set[str] = set()
        dupes = 0
        for i, entry in enumerate(raw):
            if not isinstance(entry, dict):
                raise IngestError(f"protocol listing entry {i}: not an object")
            slug = entry.get("slug") or entry.get("name")
            if not slug:
                raise IngestError(f"protocol listing entry {i}: missing field 'slug'")
            category = entry.get("category")
            if not category:
                raise IngestError(f"protocol listing entry {i} ({slug}): missing field 'category'")
            cats = entry.get("categories")
            if isinstance(cats, list) and len(cats) > 1:
                self.diagnostics.append(
                    f"protocol {slug}: multiple listed categories {cats}, using {category!r}"
                )
            if slug in seen:
                dupes += 1
                continue
            seen.add(slug)
            headers.append(ProtocolHeader(slug=str(slug), category=str(category)))
        if dupes:
            log.warning("protocol listing: collapsed %d duplicate slugs", dupes)
        if stale:
            log.warning("protocol listing served from stale cache")
        return headers

    # -- per-protocol history -------------------------------------------------

    def protocol_tvl(self, slug: str, category: str | None = None) -> ProtocolRecord:
        body, _ = self._get(f"/protocol/{slug}")
        try:
            raw = json.loads(body)
        except json.JSONDecodeError as exc:
            raise IngestError(f"protocol {slug}: response is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise IngestError(f"protocol {slug}: expected a JSON object")

        points = raw.get("tvl")
        if not isinstance(points, list):
            raise IngestError(f"protocol {slug}: missing field 'tvl'")
        cat = category or raw.get("category")
        if not cat:
            raise IngestError(f"protocol {slug}: missing field 'category'")

        # Intraday stamps collapse to UTC days, later point wins.
        by_day: dict[pd.Timestamp, float] = {}
        for j, pt in enumerate(points):
            if not isinstance(pt, dict) or "date" not in pt:
                raise IngestError(f"protocol {slug}: tvl point {j}: missing field 'date'")
            val = pt.get("totalLiquidityUSD")
            if val is None:
                raise IngestError(
                    f"protocol {slug}: tvl point {j}: missing field 'totalLiquidityUSD'"
                )
            day = pd.Timestamp(int(pt["date"]), unit="s", tz="UTC").tz_localize(None).normalize()
            by_day[day] = float(val)

        series = sorted(by_day.items())
        return ProtocolRecord(slug=slug, category=str(cat), tvl_series=series)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def build_category_panel(
    records: list[ProtocolRecord],
    exclusions: frozenset[str] | set[str] = DEFAULT_EXCLUSIONS,
    start=None,
    end=None,
) -> CategoryPanel:
    """Sum protocol TVL into a per-category daily panel over [start, end].

    A category-day cell is the sum over protocols reporting that day; days
    with no reporter stay NaN (gap handling belongs to cleaning). Categories
    in ``exclusions`` never contribute; categories with zero observations in
    the window are dropped.
    """
    if not records:
        raise DataError("cannot build a panel from an empty record set")
    exclusions = frozenset(str(e) for e in exclusions)

    kept = [r for r in records if r.category not in exclusions]
    excluded_seen = sorted({r.category for r in records if r.category in exclusions})
    if not kept:
        raise DataError("all protocol categories are excluded, nothing to aggregate")

    per_cat: dict[str, pd.Series] = {}
    for rec in kept:
        s = rec.as_series()
        if s.empty:
            continue
        acc = per_cat.get(rec.category)
        # add with NaN treated as identity, but keep all-NaN days as NaN
        per_cat[rec.category] = s if acc is None else acc.add(s, fill_value=0.0)

    if not per_cat:
        raise DataError("no protocol reported any TVL observation")

    frame = pd.DataFrame({c: per_cat[c] for c in sorted(per_cat)})
    if start is not None or end is not None:
        lo = pd.Timestamp(start).normalize() if start is not None else frame.index.min()
        hi = pd.Timestamp(end).normalize() if end is not None else frame.index.max()
        if lo > hi:
            raise ValidationError(f"start {lo.date()} is after end {hi.date()}")
        frame = frame.reindex(pd.date_range(lo, hi, freq="D"))

    nonzero = (frame.fillna(0.0) != 0.0).any(axis=0)
    dropped = [c for c in frame.columns if not nonzero[c]]
    if dropped:
        log.info("dropping %d categories with zero observations: %s", len(dropped), dropped)
    frame = frame.loc[:, nonzero]
    if frame.shape[1] == 0:
        raise DataError("every category dropped: no nonzero TVL in the requested window")

    return CategoryPanel(frame=frame, excluded=tuple(excluded_seen))


def fetch_protocol_list(api_base: str, cache_dir) -> list[ProtocolHeader]:
    return LlamaClient(api_base=api_base, cache_dir=cache_dir).protocol_list()


def fetch_protocol_tvl(slug: str, api_base: str, cache_dir) -> ProtocolRecord:
    return LlamaClient(api_base=api_base, cache_dir=cache_dir).protocol_tvl(slug)


def fetch_all(
    client: LlamaClient,
    headers: list[ProtocolHeader],
) -> tuple[list[ProtocolRecord], list[str]]:
    """Fetch histories for all headers; 404s are recorded, not fatal."""
    records: list[ProtocolRecord] = []
    missing: list[str] = []
    for h in headers:
        try:
            records.append(client.protocol_tvl(h.slug, category=h.category))
        except MissingProtocolError as exc:
            log.warning("protocol %s missing upstream, skipping", exc.slug)
            missing.append(h.slug)
    return records, missing
