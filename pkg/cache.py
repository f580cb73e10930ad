"""Result cache for evaluation rows: Redis when configured, in-memory otherwise"""

import hashlib
import json
import logging
import threading
import time
from typing import Any, Callable, Dict, List, Optional, Tuple, TypeVar

try:
    import redis
    from redis.exceptions import RedisError
    HAVE_REDIS = True
except ImportError:
    HAVE_REDIS = False

    class RedisError(Exception):
        pass

from config import get_settings

logger = logging.getLogger(__name__)


T = TypeVar("T")


class InMemoryCache:
    """Serialized values with an optional deadline per key; safe across evaluation workers"""

    def __init__(self):
        self._entries: Dict[str, Tuple[str, Optional[float]]] = {}
        self._lock = threading.Lock()

    def _live(self, key: str) -> Optional[str]:
        entry = self._entries.get(key)
        if entry is None:
            return None
        value, deadline = entry
        if deadline is not None and time.time() > deadline:
            del self._entries[key]
            return None
        return value

    def get(self, key: str) -> Optional[str]:
        with self._lock:
            return self._live(key)

    def set(self, key: str, value: str, expire: Optional[int] = None) -> bool:
        deadline = time.time() + expire if expire else None
        with self._lock:
            self._entries[key] = (value, deadline)
        return True

    def keys(self) -> List[str]:
        with self._lock:
            return [k for k in list(self._entries) if self._live(k) is not None]


def connect_redis(url: Optional[str]):
    """Client for `url`, or None when redis is not installed, not configured or not answering"""
    if not url:
        return None
    if not HAVE_REDIS:
        logger.warning("redis_url is set but the redis package is missing; rows are cached in memory")
        return None
    try:
        client = redis.from_url(url, decode_responses=True, socket_connect_timeout=5, socket_timeout=5)
        client.ping()
    except Exception as e:
        logger.warning(f"Redis at {url} unreachable ({e}); rows are cached in memory")
        return None
    logger.info(f"Caching evaluation rows in Redis at {url}")
    return client


class CacheManager:
    """JSON documents under `<prefix>:<key>`, written to Redis when connected and to memory otherwise"""

    def __init__(self, redis_url: Optional[str] = None, prefix: str = "pshield", ttl: Optional[int] = None):
        self.prefix = prefix
        self.ttl = ttl
        self.in_memory = InMemoryCache()
        self.redis_client = connect_redis(redis_url)

    def _namespaced(self, key: str) -> str:
        return f"{self.prefix}:{key}"

    def _on_redis(self, action: str, call: Callable[[Any], T]) -> Tuple[bool, Optional[T]]:
        """(handled, result); unhandled when Redis is absent or the call failed"""
        if self.redis_client is None:
            return False, None
        try:
            return True, call(self.redis_client)
        except RedisError as e:
            logger.error(f"Redis {action} failed: {e}")
            return False, None

    def get(self, key: str) -> Optional[Any]:
        name = self._namespaced(key)
        handled, raw = self._on_redis("get", lambda r: r.get(name))
        if not handled or raw is None:
            raw = self.in_memory.get(name)
        return None if raw is None else json.loads(raw)

    def set(self, key: str, value: Any, expire: Optional[int] = None) -> bool:
        name = self._namespaced(key)
        payload = json.dumps(value, sort_keys=True)
        ttl = self.ttl if expire is None else expire
        handled, stored = self._on_redis(
            "set", lambda r: r.setex(name, ttl, payload) if ttl else r.set(name, payload))
        if handled:
            return bool(stored)
        return self.in_memory.set(name, payload, ttl)


_shared: Optional[CacheManager] = None
_shared_lock = threading.Lock()


def get_cache() -> CacheManager:
    """Process-wide cache built from Settings on first use"""
    global _shared
    with _shared_lock:
        if _shared is None:
            settings = get_settings()
            _shared = CacheManager(settings.redis_url, prefix=settings.cache_prefix, ttl=settings.cache_ttl)
        return _shared


def reset_cache() -> None:
    global _shared
    with _shared_lock:
        _shared = None


class ReportCache:
    """Memoizes evaluation rows by everything that determines them"""

    def __init__(self, cache: Optional[CacheManager] = None):
        self.cache = cache or get_cache()

    @staticmethod
    def row_key(model_checksum: str, source_checksum: Optional[str], attack_hash: str, setting: str,
                seed: int, predict: str, eval_checksum: str = "", batch_size: int = 0) -> str:
        payload = "|".join([model_checksum, source_checksum or "-", attack_hash, setting, str(seed), predict,
                            eval_checksum, str(batch_size)])
        return "row:" + hashlib.sha256(payload.encode()).hexdigest()[:24]

    def get_row(self, key: str) -> Optional[dict]:
        value = self.cache.get(key)
        logger.debug(f"Report cache {'hit' if value is not None else 'miss'} for {key}")
        return value

    def set_row(self, key: str, row: dict) -> bool:
        return self.cache.set(key, row)
