"""Directory-backed, self-evolving knowledge store.

Entries are markdown files with a machine-readable metadata header under
``<root>/<scope>/<category>/<slug>.md``. The shared scope directory is named
``_shared`` and holds the command-line-tools category, which every project
sees; all other categories are project-scoped. Mutations are serialized
through an advisory lock file; reads are lock-free.
"""

from __future__ import annotations

import fcntl
import os
import re
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from .model import IoFailure, utc_now

CATEGORIES = (
    "command-line-tools",
    "build-system",
    "internal-tools",
    "test-frameworks",
    "code",
    "poc-format",
)
SHARED_SCOPE = "_shared"
SHARED_CATEGORIES = ("command-line-tools",)
RATING_MIN = -10.0
RATING_MAX = 10.0
DEFAULT_SNAPSHOT_K = 3

_ARCHIVE_DIR = "_archive"
_FRONTMATTER_RE = re.compile(r"\A---\n(.*?)\n---\n?", re.DOTALL)


class KBError(Exception):
    pass


class InvalidCategory(KBError):
    def __init__(self, category: str):
        super().__init__(f"unknown category {category!r}; expected one of {CATEGORIES}")


class InvalidScope(KBError):
    pass


class DuplicateSlug(KBError):
    def __init__(self, scope: str, category: str, slug: str):
        super().__init__(f"entry {scope}/{category}/{slug} already exists")


class EntryNotFound(KBError):
    def __init__(self, scope: str, category: str, slug: str):
        super().__init__(f"no entry at {scope}/{category}/{slug}")


class RatingOutOfRange(KBError):
    def __init__(self, score: float):
        super().__init__(f"rating {score} outside [{RATING_MIN:g}, {RATING_MAX:g}]")


def slugify(title: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", title.lower()).strip("-")
    return slug or "entry"


@dataclass(frozen=True)
class Rating:
    score: float
    session_id: str
    at: str


@dataclass(frozen=True)
class KnowledgeEntry:
    scope: str
    category: str
    slug: str
    title: str
    keywords: tuple[str, ...]
    content: str
    version: int
    ratings: tuple[Rating, ...]
    updated_at: str

    @property
    def mean_rating(self) -> float | None:
        if not self.ratings:
            return None
        return sum(r.score for r in self.ratings) / len(self.ratings)

    @property
    def ref(self) -> str:
        return f"{self.scope}/{self.category}/{self.slug}"

    def rel_path(self) -> str:
        return f"{self.scope}/{self.category}/{self.slug}.md"


@dataclass(frozen=True)
class SnapshotItem:
    title: str
    keywords: tuple[str, ...]
    mean_rating: float | None
    path: str  # relative to the KB root
    ref: str


@dataclass(frozen=True)
class KBSnapshot:
    project: str
    k: int
    categories: dict[str, tuple[SnapshotItem, ...]]
    rendered: str


def _parse_ref(ref: str) -> tuple[str, str, str]:
    parts = ref.split("/")
    if len(parts) != 3:
        raise EntryNotFound(ref, "", "")
    return parts[0], parts[1], parts[2]


class KnowledgeBase:
    def __init__(self, root: Path):
        self.root = Path(root)

    @classmethod
    def init(cls, root: Path) -> "KnowledgeBase":
        """Create (or reopen) the store skeleton; existing entries are preserved."""
        root = Path(root)
        try:
            (root / SHARED_SCOPE / "command-line-tools").mkdir(parents=True, exist_ok=True)
            (root / ".lock").touch()
        except (OSError, NotADirectoryError) as exc:
            raise IoFailure(f"cannot initialize knowledge base at {root}: {exc}") from exc
        return cls(root)

    @contextmanager
    def _write_lock(self):
        with (self.root / ".lock").open("a+") as fh:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh.fileno(), fcntl.LOCK_UN)

    # -- storage ------------------------------------------------------------

    def _entry_path(self, scope: str, category: str, slug: str) -> Path:
        return self.root / scope / category / f"{slug}.md"

    def _write_entry(self, entry: KnowledgeEntry) -> None:
        meta = {
            "title": entry.title,
            "keywords": list(entry.keywords),
            "version": entry.version,
            "updated_at": entry.updated_at,
            "ratings": [
                {"score": r.score, "session": r.session_id, "at": r.at} for r in entry.ratings
            ],
        }
        text = "---\n" + yaml.safe_dump(meta, sort_keys=True) + "---\n" + entry.content.rstrip() + "\n"
        path = self._entry_path(entry.scope, entry.category, entry.slug)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".md")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except OSError:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def _read_entry(self, path: Path) -> KnowledgeEntry:
        text = path.read_text(encoding="utf-8")
        match = _FRONTMATTER_RE.match(text)
        meta = yaml.safe_load(match.group(1)) if match else {}
        content = text[match.end():] if match else text
        ratings = tuple(
            Rating(score=float(r["score"]), session_id=str(r.get("session", "")), at=str(r.get("at", "")))
            for r in meta.get("ratings", [])
        )
        return KnowledgeEntry(
            scope=path.parent.parent.name,
            category=path.parent.name,
            slug=path.stem,
            title=str(meta.get("title", path.stem)),
            keywords=tuple(str(k) for k in meta.get("keywords", [])),
            content=content.strip("\n"),
            version=int(meta.get("version", 1)),
            ratings=ratings,
            updated_at=str(meta.get("updated_at", "")),
        )

    # -- mutations ----------------------------------------------------------

    def create_entry(
        self,
        scope: str,
        category: str,
        title: str,
        keywords: list[str] | tuple[str, ...],
        content: str,
    ) -> KnowledgeEntry:
        if category not in CATEGORIES:
            raise InvalidCategory(category)
        if category in SHARED_CATEGORIES:
            scope = SHARED_SCOPE  # command-line-tools knowledge applies to every project
        elif scope == SHARED_SCOPE:
            raise InvalidScope(f"category {category!r} is project-scoped; pick a project scope")
        if not scope:
            raise InvalidScope("scope must be nonempty")
        slug = slugify(title)
        with self._write_lock():
            path = self._entry_path(scope, category, slug)
            if path.exists():
                raise DuplicateSlug(scope, category, slug)
            entry = KnowledgeEntry(
                scope=scope,
                category=category,
                slug=slug,
                title=title,
                keywords=tuple(keywords),
                content=content,
                version=1,
                ratings=(),
                updated_at=utc_now(),
            )
            self._write_entry(entry)
        return entry

    def update_entry(
        self,
        ref: str,
        new_content: str,
        new_keywords: list[str] | tuple[str, ...] | None = None,
    ) -> KnowledgeEntry:
        """Replace content, bump the version by one, keep the rating history.

        The previous version's content is archived next to the entry under
        ``_archive/<slug>.v<N>.md``.
        """
        scope, category, slug = _parse_ref(ref)
        with self._write_lock():
            path = self._entry_path(scope, category, slug)
            if not path.exists():
                raise EntryNotFound(scope, category, slug)
            old = self._read_entry(path)
            archive = path.parent / _ARCHIVE_DIR
            archive.mkdir(exist_ok=True)
            (archive / f"{slug}.v{old.version}.md").write_text(old.content + "\n", encoding="utf-8")
            entry = replace(
                old,
                content=new_content,
                keywords=tuple(new_keywords) if new_keywords is not None else old.keywords,
                version=old.version + 1,
                updated_at=utc_now(),
            )
            self._write_entry(entry)
        return entry

    def rate_entry(self, ref: str, score: float, session_id: str) -> KnowledgeEntry:
        """Append one rating; history is never rewritten."""
        if not RATING_MIN <= score <= RATING_MAX:
            raise RatingOutOfRange(score)
        scope, category, slug = _parse_ref(ref)
        with self._write_lock():
            path = self._entry_path(scope, category, slug)
            if not path.exists():
                raise EntryNotFound(scope, category, slug)
            old = self._read_entry(path)
            entry = replace(
                old,
                ratings=old.ratings + (Rating(score=float(score), session_id=session_id, at=utc_now()),),
            )
            self._write_entry(entry)
        return entry

    # -- reads --------------------------------------------------------------

    def get_entry(self, ref: str) -> KnowledgeEntry:
        scope, category, slug = _parse_ref(ref)
        path = self._entry_path(scope, category, slug)
        if not path.exists():
            raise EntryNotFound(scope, category, slug)
        return self._read_entry(path)

    def entries(self, scope: str | None = None) -> list[KnowledgeEntry]:
        scopes: list[Path]
        if scope is not None:
            scopes = [self.root / scope]
        else:
            scopes = sorted(p for p in self.root.iterdir() if p.is_dir()) if self.root.exists() else []
        found = []
        for scope_dir in scopes:
            if not scope_dir.is_dir():
                continue
            for category in CATEGORIES:
                cat_dir = scope_dir / category
                if not cat_dir.is_dir():
                    continue
                for path in sorted(cat_dir.glob("*.md")):
                    found.append(self._read_entry(path))
        return found

    def visible_entries(self, project: str) -> list[KnowledgeEntry]:
        """A project sees its own entries plus the shared scope."""
        return self.entries(SHARED_SCOPE) + (self.entries(project) if project != SHARED_SCOPE else [])

    @staticmethod
    def rank(entries: list[KnowledgeEntry]) -> list[KnowledgeEntry]:
        """Rated entries before unrated, mean descending, then newest update, then slug."""
        ordered = sorted(entries, key=lambda e: e.slug)
        ordered = sorted(ordered, key=lambda e: e.updated_at, reverse=True)
        return sorted(ordered, key=lambda e: (e.mean_rating is None, -(e.mean_rating or 0.0)))

    def snapshot(self, project: str, k: int = DEFAULT_SNAPSHOT_K) -> KBSnapshot:
        """Top-k entries per category with mean ratings, keywords and content paths."""
        visible = self.visible_entries(project)
        by_category: dict[str, tuple[SnapshotItem, ...]] = {}
        for category in CATEGORIES:
            ranked = self.rank([e for e in visible if e.category == category])[:k]
            by_category[category] = tuple(
                SnapshotItem(
                    title=e.title,
                    keywords=e.keywords,
                    mean_rating=e.mean_rating,
                    path=e.rel_path(),
                    ref=e.ref,
                )
                for e in ranked
            )
        return KBSnapshot(
            project=project,
            k=k,
            categories=by_category,
            rendered=self._render_snapshot(project, by_category),
        )

    def _render_snapshot(self, project: str, by_category: dict[str, tuple[SnapshotItem, ...]]) -> str:
        lines = [
            f"## Knowledge base snapshot (project: {project})",
            f"Full entries live under {self.root}; explore and search those directories for details.",
            "Rate every entry you use with a score in [-10, 10].",
            "",
        ]
        for category in CATEGORIES:
            lines.append(f"### {category}")
            items = by_category.get(category, ())
            if not items:
                lines.append("(no entries)")
            else:
                for item in items:
                    mean = "unrated" if item.mean_rating is None else f"{item.mean_rating:.1f}"
                    keywords = ", ".join(item.keywords)
                    lines.append(f"- [{mean}] {item.title} (keywords: {keywords}) -> {item.path}")
            lines.append("")
        return "\n".join(lines).rstrip() + "\n"

    def query(self, project: str, terms: list[str] | tuple[str, ...]) -> list[KnowledgeEntry]:
        """Entries whose title or keywords match any term, ranked by match count then mean."""
        wanted = [t.lower() for t in terms if t.strip()]
        if not wanted:
            return []

        def matches(entry: KnowledgeEntry) -> int:
            haystacks = [entry.title.lower()] + [k.lower() for k in entry.keywords]
            return sum(1 for t in wanted if any(t in h for h in haystacks))

        scored = [(matches(e), e) for e in self.visible_entries(project)]
        hits = [(n, e) for n, e in scored if n > 0]
        ranked_by_quality = self.rank([e for _, e in hits])
        order = {e.ref: i for i, e in enumerate(ranked_by_quality)}
        hits.sort(key=lambda pair: (-pair[0], order[pair[1].ref]))
        return [e for _, e in hits]

    def stats(self) -> dict:
        entries = self.entries()
        ratings = [r.score for e in entries for r in e.ratings]
        per_category: dict[str, int] = {c: 0 for c in CATEGORIES}
        for entry in entries:
            per_category[entry.category] += 1
        return {
            "entries": len(entries),
            "ratings": len(ratings),
            "mean_rating": (sum(ratings) / len(ratings)) if ratings else None,
            "versions": sum(e.version for e in entries),
            "per_category": per_category,
        }
