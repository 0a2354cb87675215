import asyncio
import json
import threading
from pathlib import Path
from typing import Awaitable, Callable, Dict, List, Optional, Tuple, Union

from loguru import logger

from core.pivot import PivotDocument

CacheKey = Tuple[str, int, str]


class PivotCache:
    """
    Pivot-Cache (query_id, tau, generator_id) -> PivotDocument.
    First writer wins: ein zweiter Eintrag zum selben Schlüssel wird verworfen.
    Mit Pfad wird jede neue Zeile sofort an die JSONL-Datei angehängt.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self._entries: Dict[CacheKey, PivotDocument] = {}
        self._write_lock = threading.Lock()
        self._key_locks: Dict[CacheKey, asyncio.Lock] = {}
        self.load()

    # ---------------------------------------------------------
    # Lade Cache beim Start
    # ---------------------------------------------------------
    def load(self) -> int:
        if self.path is None or not self.path.exists():
            return 0

        loaded = 0
        with self.path.open("r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    pivot = PivotDocument.model_validate(json.loads(line))
                except Exception as e:
                    logger.error(f"Pivot-Cache {self.path} Zeile {line_no} unlesbar: {e}")
                    continue
                if pivot.cache_key() not in self._entries:
                    self._entries[pivot.cache_key()] = pivot
                    loaded += 1

        logger.info(f"📦 Pivot-Cache geladen: {loaded} Einträge aus {self.path}")
        return loaded

    # ---------------------------------------------------------
    # Hole / setze Werte
    # ---------------------------------------------------------
    def get(self, query_id: str, tau: int, generator_id: str) -> Optional[PivotDocument]:
        return self._entries.get((query_id, tau, generator_id))

    def put(self, pivot: PivotDocument) -> PivotDocument:
        """Gibt den tatsächlich gespeicherten Eintrag zurück (ggf. den älteren)."""
        key = pivot.cache_key()
        with self._write_lock:
            existing = self._entries.get(key)
            if existing is not None:
                return existing
            self._entries[key] = pivot
            self._append(pivot)
        return pivot

    async def get_or_create(
        self, query_id: str, tau: int, generator_id: str, factory: Callable[[], Awaitable[PivotDocument]]
    ) -> PivotDocument:
        key = (query_id, tau, generator_id)
        cached = self._entries.get(key)
        if cached is not None:
            return cached

        lock = self._key_locks.setdefault(key, asyncio.Lock())
        async with lock:
            cached = self._entries.get(key)
            if cached is None:
                cached = self.put(await factory())
        # Eintrag steht fest, spätere Aufrufe nehmen den schnellen Pfad
        self._key_locks.pop(key, None)
        return cached

    def pivots_for(self, generator_id: str, tau: int) -> Dict[str, PivotDocument]:
        return {k[0]: v for k, v in self._entries.items() if k[1] == tau and k[2] == generator_id}

    def entries(self) -> List[PivotDocument]:
        return [self._entries[k] for k in sorted(self._entries)]

    def __len__(self) -> int:
        return len(self._entries)

    # ---------------------------------------------------------
    # Schreibe auf Disk (JSONL, append)
    # ---------------------------------------------------------
    def _append(self, pivot: PivotDocument) -> None:
        if self.path is None:
            return
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(pivot.model_dump(), ensure_ascii=False, sort_keys=True) + "\n")
        except OSError as e:
            logger.error(f"Fehler beim Speichern des Pivot-Caches: {e}")
