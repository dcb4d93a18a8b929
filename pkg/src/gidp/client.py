"""Thin HTTP client for the service.

With a base URL the client talks to a running server; without one it mounts
the ASGI app in-process (same request/response path, no sockets), which is how
the CLI works standalone.
"""

from __future__ import annotations

import asyncio

import httpx


class ServiceError(RuntimeError):
    def __init__(self, status_code: int, detail: str):
        super().__init__(f"[{status_code}] {detail}")
        self.status_code = status_code
        self.detail = detail


class ServiceClient:
    def __init__(self, base_url: str | None = None):
        self.base_url = base_url

    def get(self, path: str) -> dict:
        return asyncio.run(self._request("GET", path, None))

    def post(self, path: str, payload: dict) -> dict:
        return asyncio.run(self._request("POST", path, payload))

    async def _request(self, method: str, path: str, payload: dict | None) -> dict:
        if self.base_url:
            transport = None
            base = self.base_url
        else:
            from .service import create_app  # deferred: pulls in the numeric stack

            transport = httpx.ASGITransport(app=create_app())
            base = "http://gidp.internal"
        async with httpx.AsyncClient(transport=transport, base_url=base, timeout=None) as client:
            resp = await client.request(method, path, json=payload)
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            raise ServiceError(resp.status_code, str(detail))
        return resp.json()
