"""Driver test doubles: scripted, instrumented, stalling and failing."""

from __future__ import annotations

import threading
import time

from webprobe.probe import BrowserDriver, DriverFailure, NavigationResult


class ScriptedDriver(BrowserDriver):
    """Returns canned HAR bytes (and optional paint events) for any URL."""

    def __init__(self, har: bytes, paint_events=(), per_url=None):
        self.har = har
        self.paint_events = list(paint_events)
        self.per_url = per_url or {}
        self.navigations = 0

    def launch(self, spec):
        self.spec = spec

    def navigate(self, url, timeout_ms):
        self.navigations += 1
        har = self.per_url.get(url, self.har)
        return NavigationResult(har=har, paint_events=list(self.paint_events))

    def clear_resource_cache(self):
        pass

    def clear_dns_cache(self):
        pass

    def close(self):
        pass


class InstrumentedDriver(BrowserDriver):
    """Wraps another driver and records the call sequence."""

    def __init__(self, inner: BrowserDriver):
        self.inner = inner
        self.calls: list[str] = []

    def launch(self, spec):
        self.calls.append("launch")
        self.inner.launch(spec)

    def navigate(self, url, timeout_ms):
        self.calls.append("navigate")
        return self.inner.navigate(url, timeout_ms)

    def clear_resource_cache(self):
        self.calls.append("clear_resource_cache")
        self.inner.clear_resource_cache()

    def clear_dns_cache(self):
        self.calls.append("clear_dns_cache")
        self.inner.clear_dns_cache()

    def close(self):
        self.calls.append("close")
        self.inner.close()


class StallingDriver(BrowserDriver):
    """navigate() never completes on its own; close() releases it."""

    def __init__(self):
        self._released = threading.Event()

    def launch(self, spec):
        pass

    def navigate(self, url, timeout_ms):
        self._released.wait()
        raise DriverFailure("stalling driver was released without a result")

    def clear_resource_cache(self):
        pass

    def clear_dns_cache(self):
        pass

    def close(self):
        self._released.set()


class SlowWellBehavedDriver(BrowserDriver):
    """Honors its own navigate timeout, like a real driver on a dead site."""

    def __init__(self, har_after: bytes | None = None):
        self.har_after = har_after

    def launch(self, spec):
        pass

    def navigate(self, url, timeout_ms):
        from webprobe.probe import NavigationTimeout

        time.sleep(timeout_ms / 1000.0)
        raise NavigationTimeout(
            f"load event never fired within {timeout_ms:.0f} ms",
            partial_har=self.har_after,
        )

    def clear_resource_cache(self):
        pass

    def clear_dns_cache(self):
        pass

    def close(self):
        pass


class FailingDriver(BrowserDriver):
    """Raises DriverFailure at a chosen call."""

    def __init__(self, fail_on="navigate", message="boom"):
        self.fail_on = fail_on
        self.message = message

    def _maybe(self, name):
        if name == self.fail_on:
            raise DriverFailure(self.message)

    def launch(self, spec):
        self._maybe("launch")

    def navigate(self, url, timeout_ms):
        self._maybe("navigate")
        return NavigationResult(har=b"")

    def clear_resource_cache(self):
        self._maybe("clear_resource_cache")

    def clear_dns_cache(self):
        self._maybe("clear_dns_cache")

    def close(self):
        self._maybe("close")
