"""
출력 디렉터리 관리: content hash manifest 와 단일 writer lock
"""

import hashlib
import json
import logging
import os
from typing import Dict, List

from near.core.errors import FormatError, TrainingError
from near.schemas.manifest import Manifest, ManifestEntry

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".near.lock"
_SKIPPED = {MANIFEST_NAME, LOCK_NAME}


def sha256_file(path: str, block_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            block = f.read(block_size)
            if not block:
                break
            digest.update(block)
    return digest.hexdigest()


def list_artifacts(root: str) -> List[str]:
    """root 아래 모든 파일의 상대 경로 ('/' 구분, 정렬)"""
    paths = []
    for directory, _, files in os.walk(root):
        for name in files:
            if name in _SKIPPED:
                continue
            rel = os.path.relpath(os.path.join(directory, name), root)
            paths.append(rel.replace(os.sep, "/"))
    return sorted(paths)


def build_manifest(root: str, seed: int) -> Manifest:
    entries = []
    for rel in list_artifacts(root):
        full = os.path.join(root, *rel.split("/"))
        entries.append(ManifestEntry(path=rel, sha256=sha256_file(full), size=os.path.getsize(full)))
    return Manifest(seed=seed, entries=entries)


def write_manifest(root: str, seed: int) -> Manifest:
    manifest = build_manifest(root, seed)
    with open(os.path.join(root, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest.model_dump(), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote manifest with {len(manifest.entries)} artifacts to {root}")
    return manifest


def read_manifest(root: str) -> Manifest:
    """
    Raises:
        FormatError: manifest 가 없거나 읽을 수 없는 경우
    """
    path = os.path.join(root, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FormatError(f"No {MANIFEST_NAME} in {root}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return Manifest(**json.load(f))
    except (ValueError, TypeError) as e:
        raise FormatError(f"Unreadable manifest {path}: {e}") from e


def verify_manifest(root: str) -> Dict[str, str]:
    """hash 가 다르거나 사라진 산출물 경로 → 사유"""
    problems = {}
    for entry in read_manifest(root).entries:
        full = os.path.join(root, *entry.path.split("/"))
        if not os.path.exists(full):
            problems[entry.path] = "missing"
        elif sha256_file(full) != entry.sha256:
            problems[entry.path] = "hash mismatch"
    return problems


class OutputLock:
    """
    출력 디렉터리에 하나의 writer 만 허용

    Raises:
        TrainingError: 이미 lock 이 있는 경우
    """

    def __init__(self, root: str):
        self.root = root
        self.path = os.path.join(root, LOCK_NAME)
        self._fd = None

    def __enter__(self) -> "OutputLock":
        os.makedirs(self.root, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise TrainingError(f"Output directory {self.root} is locked by another run") from e
        os.write(self._fd, str(os.getpid()).encode("ascii"))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        if os.path.exists(self.path):
            os.remove(self.path)
