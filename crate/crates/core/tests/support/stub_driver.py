"""Minimal cell executor speaking the line-delimited JSON protocol.

Used by the integration tests to exercise the Rust client against a live
interpreter.
"""
import builtins
import io
import json
import linecache
import sys
import time
import traceback

OUTPUT_LIMIT = 64 * 1024


class StdinNotImplementedError(NotImplementedError):
    pass


class _DeniedStdin(io.TextIOBase):
    def read(self, *args):
        raise StdinNotImplementedError("raw_input was called, but this frontend does not support input requests.")

    readline = read

    def readable(self):
        return True


def _deny_input(prompt=""):
    raise StdinNotImplementedError("raw_input was called, but this frontend does not support input requests.")


def main():
    proto = sys.stdout
    requests = sys.stdin

    def emit(**event):
        proto.write(json.dumps(event) + "\n")
        proto.flush()

    builtins.input = _deny_input
    sys.stdin = _DeniedStdin()
    namespace = {"__name__": "__main__", "__builtins__": builtins}
    emit(type="ready", version="python%d.%d" % sys.version_info[:2])

    for line in requests:
        line = line.strip()
        if not line:
            continue
        req = json.loads(line)
        if req.get("op") == "close":
            break
        index = req["cell_index"]
        emit(type="cell_start", cell_index=index)
        captured = io.StringIO()
        sys.stdout = captured
        started = time.monotonic()
        filename = "<cell %d>" % index
        source = req["source"]
        linecache.cache[filename] = (len(source), None, source.splitlines(True), filename)
        try:
            exec(compile(source, filename, "exec"), namespace)
        except BaseException as exc:  # noqa: BLE001
            sys.stdout = proto
            emit(
                type="cell_error",
                cell_index=index,
                ename=type(exc).__name__,
                evalue=str(exc),
                traceback=traceback.format_exception(type(exc), exc, exc.__traceback__.tb_next),
                duration=time.monotonic() - started,
            )
        else:
            sys.stdout = proto
            emit(
                type="cell_ok",
                cell_index=index,
                duration=time.monotonic() - started,
                stdout=captured.getvalue()[:OUTPUT_LIMIT],
            )
    emit(type="bye")


if __name__ == "__main__":
    main()
