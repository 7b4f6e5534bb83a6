"""Line-oriented ``key=value`` run configuration with namespaced keys (``train.lr``, ``vote.alpha``)."""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_config(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        out[key] = value
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class Config:
    def __init__(self, values: dict[str, str] | None = None, source: str = "<defaults>"):
        self.values = dict(values or {})
        self.source = source

    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls(parse_config(path.read_text(), str(path)), str(path))

    def override(self, **pairs) -> "Config":
        """New config with every non-None value set; keys use ``__`` for the namespace dot."""
        vals = dict(self.values)
        for k, v in pairs.items():
            if v is not None:
                vals[k.replace("__", ".")] = str(v)
        return Config(vals, self.source)

    def _get(self, key, default, conv):
        if key not in self.values:
            return default
        try:
            return conv(self.values[key])
        except ValueError as e:
            raise ConfigError(f"{self.source}: bad value for {key}: {self.values[key]!r}") from e

    def str(self, key: str, default: str | None = None) -> str | None:
        return self._get(key, default, str)

    def int(self, key: str, default: int | None = None) -> int | None:
        return self._get(key, default, int)

    def float(self, key: str, default: float | None = None) -> float | None:
        return self._get(key, default, float)

    def bool(self, key: str, default: bool | None = None) -> bool | None:
        def conv(s: str) -> bool:
            s = s.lower()
            if s in _TRUE:
                return True
            if s in _FALSE:
                return False
            raise ValueError(s)

        return self._get(key, default, conv)

    def section(self, prefix: str) -> dict[str, str]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def echo(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in sorted(self.values.items()))
