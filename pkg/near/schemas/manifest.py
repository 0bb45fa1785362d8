from typing import List

from pydantic import BaseModel, Field


class ManifestEntry(BaseModel):
    """dataset 산출물 하나"""

    path: str  # dataset root 기준 상대 경로, '/' 구분
    sha256: str
    size: int = Field(ge=0)


class Manifest(BaseModel):
    seed: int
    entries: List[ManifestEntry]

    def paths(self) -> List[str]:
        return [entry.path for entry in self.entries]

    def find(self, path: str) -> ManifestEntry:
        for entry in self.entries:
            if entry.path == path:
                return entry
        raise KeyError(path)

    class Config:
        json_schema_extra = {
            "example": {
                "seed": 0,
                "entries": [
                    {
                        "path": "scene_000/slat_lh.slat",
                        "sha256": "9f86d081884c7d659a2feaa0c55ad015a3bf4f1b2b0b822cd15d6c15b0f00a08",
                        "size": 20480,
                    }
                ],
            }
        }
