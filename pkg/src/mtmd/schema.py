"""Ad domains, prediction tasks, and the declarative feature schema."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Iterable

from .errors import ConfigurationError


class Surface(enum.IntEnum):
    HomeFeed = 0
    Search = 1
    RelatedPin = 2


class AdProduct(enum.IntEnum):
    Standard = 0
    Shopping = 1


class TaskId(enum.IntEnum):
    CTR = 0
    GCTR = 1
    OCTR = 2


TASKS: tuple[TaskId, ...] = tuple(TaskId)
SIDES = ("query", "item")


def task_applies(task: TaskId, product: AdProduct) -> bool:
    """OCTR has no meaning for shopping ads."""
    return not (task == TaskId.OCTR and product == AdProduct.Shopping)


@dataclass(frozen=True, order=True)
class DomainKey:
    surface: Surface
    product: AdProduct

    @property
    def index(self) -> int:
        return int(self.surface) * len(AdProduct) + int(self.product)

    @classmethod
    def from_index(cls, i: int) -> "DomainKey":
        return cls(Surface(i // len(AdProduct)), AdProduct(i % len(AdProduct)))

    def __str__(self) -> str:
        return f"{self.surface.name}/{self.product.name}"

    @classmethod
    def parse(cls, text: str) -> "DomainKey":
        try:
            s, p = text.split("/")
            return cls(Surface[s], AdProduct[p])
        except (ValueError, KeyError):
            raise ConfigurationError(f"bad domain key {text!r}") from None


ALL_DOMAINS: tuple[DomainKey, ...] = tuple(DomainKey(s, p) for s in Surface for p in AdProduct)


def domains_where(surface: Iterable[Surface] | None = None, product: Iterable[AdProduct] | None = None) -> frozenset:
    surfaces = set(Surface if surface is None else surface)
    products = set(AdProduct if product is None else product)
    return frozenset(d for d in ALL_DOMAINS if d.surface in surfaces and d.product in products)


@dataclass(frozen=True)
class ContinuousField:
    name: str
    side: str
    available: frozenset
    shared: bool = False
    default: float = 0.0

    kind = "continuous"
    high_level = False

    @property
    def dim(self) -> int:
        return 1


@dataclass(frozen=True)
class CategoricalField:
    name: str
    side: str
    cardinality: int
    emb_dim: int
    available: frozenset
    shared: bool = False
    high_level: bool = False
    default: int = 0

    kind = "categorical"

    @property
    def dim(self) -> int:
        return self.emb_dim


@dataclass(frozen=True)
class SideLayout:
    """Column layout of the adapted vector for one tower side."""

    fields: tuple
    continuous: tuple  # fields, in declaration order
    categorical: tuple
    offsets: tuple  # start column of each field in the adapted vector
    width: int
    shared_cols: tuple
    high_level_cols: tuple


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple = field(default_factory=tuple)

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate field names in schema")
        for f in self.fields:
            if f.side not in SIDES:
                raise ConfigurationError(f"field {f.name!r} has unknown side {f.side!r}")
            if f.shared and set(f.available) != set(ALL_DOMAINS):
                raise ConfigurationError(f"shared field {f.name!r} must be available in every domain")
            if isinstance(f, CategoricalField) and f.cardinality < 1:
                raise ConfigurationError(f"field {f.name!r} needs cardinality >= 1")
        for side in SIDES:
            fs = self.side_fields(side)
            if len(fs) < 2:
                raise ConfigurationError(f"{side} side needs at least two fields")
            if not any(f.high_level for f in fs):
                raise ConfigurationError(f"{side} side has no high-level categorical field")

    def side_fields(self, side: str) -> tuple:
        return tuple(f for f in self.fields if f.side == side)

    def layout(self, side: str) -> SideLayout:
        fs = self.side_fields(side)
        offsets, col = [], 0
        shared, hl = [], []
        for f in fs:
            offsets.append(col)
            cols = list(range(col, col + f.dim))
            if f.shared:
                shared.extend(cols)
            if f.high_level:
                hl.extend(cols)
            col += f.dim
        return SideLayout(
            fields=fs,
            continuous=tuple(f for f in fs if isinstance(f, ContinuousField)),
            categorical=tuple(f for f in fs if isinstance(f, CategoricalField)),
            offsets=tuple(offsets),
            width=col,
            shared_cols=tuple(shared),
            high_level_cols=tuple(hl),
        )

    def canonical_text(self) -> str:
        lines = []
        for f in self.fields:
            avail = ",".join(str(d) for d in sorted(f.available))
            if isinstance(f, CategoricalField):
                lines.append(
                    f"[field.{f.name}]\nside = {f.side}\nkind = categorical\ncardinality = {f.cardinality}\n"
                    f"emb_dim = {f.emb_dim}\nshared = {str(f.shared).lower()}\nhigh_level = {str(f.high_level).lower()}\n"
                    f"available = {avail}\n"
                )
            else:
                lines.append(
                    f"[field.{f.name}]\nside = {f.side}\nkind = continuous\ndefault = {f.default!r}\n"
                    f"shared = {str(f.shared).lower()}\navailable = {avail}\n"
                )
        return "\n".join(lines)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()[:16]


def schema_from_config(sections: dict[str, dict[str, str]]) -> FeatureSchema:
    """Inverse of :meth:`FeatureSchema.canonical_text` after config parsing."""
    fields = []
    for name, sec in sections.items():
        if not name.startswith("field."):
            continue
        fname = name[len("field.") :]
        avail = frozenset(DomainKey.parse(t) for t in sec["available"].split(",") if t)
        flag = lambda k: sec.get(k, "false") == "true"  # noqa: E731
        if sec["kind"] == "categorical":
            fields.append(
                CategoricalField(
                    fname, sec["side"], int(sec["cardinality"]), int(sec["emb_dim"]), avail, flag("shared"), flag("high_level")
                )
            )
        else:
            fields.append(ContinuousField(fname, sec["side"], avail, flag("shared"), float(sec.get("default", "0.0"))))
    return FeatureSchema(tuple(fields))


def make_default_schema(emb_dim: int = 8) -> FeatureSchema:
    everywhere = frozenset(ALL_DOMAINS)
    search_only = domains_where(surface=[Surface.Search])
    not_search = domains_where(surface=[Surface.HomeFeed, Surface.RelatedPin])
    related_only = domains_where(surface=[Surface.RelatedPin])
    shopping_only = domains_where(product=[AdProduct.Shopping])
    standard_only = domains_where(product=[AdProduct.Standard])

    q, i = "query", "item"
    C, K = ContinuousField, CategoricalField
    fields = [
        C("user_ctr_7d", q, everywhere, shared=True),
        C("user_ctr_30d", q, everywhere, shared=True),
        C("user_engagement", q, everywhere, shared=True),
        C("user_activity_days", q, everywhere, shared=True),
        C("session_length", q, everywhere, shared=True),
        C("session_recency", q, everywhere, shared=True),
        C("device_score", q, everywhere, shared=True),
        C("hour_of_day", q, everywhere, shared=True),
        C("search_query_length", q, search_only),
        C("search_intent_score", q, search_only),
        C("feed_position", q, not_search),
        C("context_pin_score", q, related_only),
        K("surface_id", q, len(Surface), emb_dim, everywhere, high_level=True),
        K("user_country", q, 30, emb_dim, everywhere, shared=True),
        K("user_segment", q, 8, emb_dim, everywhere, shared=True, high_level=True),
        K("search_query_category", q, 40, emb_dim, search_only),
        C("ad_ctr_7d", i, everywhere, shared=True),
        C("ad_ctr_30d", i, everywhere, shared=True),
        C("ad_age_days", i, everywhere, shared=True),
        C("creative_quality", i, everywhere, shared=True),
        C("advertiser_spend", i, everywhere, shared=True),
        C("bid_price", i, everywhere, shared=True),
        C("ad_impressions", i, everywhere, shared=True),
        C("landing_quality", i, everywhere, shared=True),
        C("product_price", i, shopping_only),
        C("product_rating", i, shopping_only),
        C("outbound_ratio", i, standard_only),
        C("video_length", i, everywhere),
        K("ad_product_type", i, len(AdProduct), emb_dim, everywhere, high_level=True),
        K("ad_format", i, 4, emb_dim, everywhere, high_level=True),
        K("advertiser_category", i, 50, emb_dim, everywhere, shared=True),
        K("creative_type", i, 10, emb_dim, everywhere, shared=True),
        K("merchant_tier", i, 6, emb_dim, shopping_only),
        K("campaign_objective", i, 5, emb_dim, standard_only),
    ]
    return FeatureSchema(tuple(fields))


@dataclass
class Example:
    """One (request, ad) record. Feature tuples follow schema declaration
    order for their side; categorical values are ints."""

    id: int
    domain: DomainKey
    query: tuple
    item: tuple
    teacher: dict = field(default_factory=dict)

    def features(self, side: str) -> tuple:
        return self.query if side == "query" else self.item
