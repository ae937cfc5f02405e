"""Versioned prompt templates.

Each asset has a ``[system]`` and a ``[user]`` section; ``{name}`` fields are
filled with :meth:`Template.request`. The wording is original to this package.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

from ..llm.gateway import PromptRequest

VERSION = "v1"


@dataclass(frozen=True)
class Template:
    name: str
    system: str
    user: str

    def request(self, tag: str | None = None, max_tokens: int = 512, **fields) -> PromptRequest:
        return PromptRequest(
            system_text=self.system.format(**fields),
            user_text=self.user.format(**fields),
            max_tokens=max_tokens,
            tag=tag or self.name,
        )


def load_template(name: str, version: str = VERSION) -> Template:
    text = resources.files(__package__).joinpath(f"{name}.{version}.txt").read_text(encoding="utf-8")
    head, _, rest = text.partition("[user]\n")
    system = head.replace("[system]\n", "", 1).strip()
    return Template(name, system, rest.rstrip("\n"))
