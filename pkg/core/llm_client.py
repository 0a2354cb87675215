import asyncio
import os
from typing import Dict, List, Optional

import openai
from dotenv import load_dotenv
from loguru import logger
from openai import AsyncOpenAI
from pydantic import BaseModel, ConfigDict, Field

load_dotenv()


class BackendError(RuntimeError):
    pass


class ChatBackendConfig(BaseModel):
    """Chat-Completions-Endpunkt (OpenAI-kompatibel). Zugangsdaten kommen aus der Umgebung."""

    model_config = ConfigDict(frozen=True)

    model: str = "gpt-4.1-mini"
    base_url: Optional[str] = None
    api_key_env: str = "OPENAI_API_KEY"
    base_url_env: str = "OPENAI_BASE_URL"
    max_retries: int = Field(default=3, ge=1)
    initial_backoff: float = Field(default=1.0, ge=0)
    timeout: float = Field(default=60.0, gt=0)
    temperature: float = Field(default=0.0, ge=0)
    top_p: float = Field(default=1.0, gt=0, le=1)
    seed: Optional[int] = None
    max_concurrent: int = Field(default=5, ge=1)


class ChatClient:
    """
    Dünner Adapter um AsyncOpenAI.
    Client und Semaphore werden pro Event-Loop angelegt, Retries mit
    exponentiellem Backoff laufen hier statt im SDK (max_retries=0).
    """

    def __init__(self, config: ChatBackendConfig):
        self.config = config
        self._client: Optional[AsyncOpenAI] = None
        self._client_loop = None
        self._semaphore: Optional[asyncio.Semaphore] = None
        self._semaphore_loop = None

    def _get_client(self) -> AsyncOpenAI:
        current_loop = asyncio.get_running_loop()

        if self._client is None or self._client_loop is not current_loop:
            api_key = os.getenv(self.config.api_key_env)
            if not api_key:
                raise BackendError(f"Umgebungsvariable {self.config.api_key_env} nicht gesetzt")
            base_url = os.getenv(self.config.base_url_env) or self.config.base_url
            self._client = AsyncOpenAI(
                api_key=api_key,
                base_url=base_url,
                timeout=self.config.timeout,
                max_retries=0,
            )
            self._client_loop = current_loop

        return self._client

    def _get_semaphore(self) -> asyncio.Semaphore:
        current_loop = asyncio.get_running_loop()

        if self._semaphore is None or self._semaphore_loop is not current_loop:
            self._semaphore = asyncio.Semaphore(self.config.max_concurrent)
            self._semaphore_loop = current_loop

        return self._semaphore

    async def complete(
        self,
        messages: List[Dict[str, str]],
        max_tokens: Optional[int] = None,
        temperature: Optional[float] = None,
        top_p: Optional[float] = None,
        seed: Optional[int] = None,
    ) -> str:
        request = {
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature if temperature is None else temperature,
            "top_p": self.config.top_p if top_p is None else top_p,
        }
        if max_tokens is not None:
            request["max_tokens"] = max_tokens
        seed = self.config.seed if seed is None else seed
        if seed is not None:
            request["seed"] = seed

        delay = self.config.initial_backoff
        async with self._get_semaphore():
            for attempt in range(1, self.config.max_retries + 1):
                try:
                    response = await self._get_client().chat.completions.create(**request)
                    return response.choices[0].message.content or ""
                except (openai.APIConnectionError, openai.RateLimitError, openai.InternalServerError) as exc:
                    if attempt == self.config.max_retries:
                        raise BackendError(
                            f"{self.config.model}: Anfrage nach {attempt} Versuchen gescheitert ({exc})"
                        ) from exc
                    logger.warning(f"⚠️ {self.config.model}: Versuch {attempt} fehlgeschlagen ({exc}), neuer Versuch in {delay:.1f}s")
                    await asyncio.sleep(delay)
                    delay *= 2.0
                except openai.APIStatusError as exc:
                    raise BackendError(f"{self.config.model}: HTTP {exc.status_code} ({exc})") from exc
        raise BackendError(f"{self.config.model}: keine Antwort")
