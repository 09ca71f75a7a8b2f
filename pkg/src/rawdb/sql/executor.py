"""Fragment-level partial results and their merge algebra.

Each fragment reduces its block's qualifying rows into a partial: a row
batch, per-aggregate states, a group table or a top-k heap. Merges are
associative and commutative across fragments; the final pass applies ORDER
BY/LIMIT and formats output rows. Where SQL leaves order unspecified the
engine orders deterministically by (value, block ordinal, row position).
"""

from __future__ import annotations

import base64
import heapq
from dataclasses import dataclass

import numpy as np

from ..catalog import TYPE_FLOAT64, TYPE_INT64
from ..errors import QueryError
from ..metadata import HllSketch


def _sketch_to_json(sk: HllSketch) -> dict:
    return {"p": sk.p, "registers": base64.b64encode(sk.registers.tobytes()).decode()}


def _sketch_from_json(d: dict) -> HllSketch:
    return HllSketch(d["p"], np.frombuffer(base64.b64decode(d["registers"]), dtype=np.uint8))


def _distinct_key(value) -> bytes:
    """Canonical byte form for COUNT DISTINCT hashing: equal values, equal bytes."""
    if isinstance(value, float):
        return repr(value).encode()
    if isinstance(value, int):
        return str(value).encode()
    return str(value).encode()


class _AggState:
    """One aggregate's accumulator; JSON-serializable for the wire."""

    def __init__(self, spec: dict):
        self.func = spec["func"]
        self.col = spec["col"]
        self.distinct = spec.get("distinct", False)
        self.exact = spec.get("exact", False)
        self.p = spec.get("p", 12)
        if self.func == "count" and self.distinct:
            self.value = set() if self.exact else HllSketch(self.p)
        elif self.func == "count":
            self.value = 0
        elif self.func == "avg":
            self.value = [0.0, 0]
        else:  # sum | min | max
            self.value = None

    def add(self, row: tuple) -> None:
        f = self.func
        if f == "count":
            if self.distinct:
                v = row[self.col]
                if self.exact:
                    self.value.add(v)
                else:
                    self.value.insert(_distinct_key(v))
            else:
                self.value += 1
            return
        v = row[self.col]
        if f == "sum":
            self.value = v if self.value is None else self.value + v
        elif f == "avg":
            self.value[0] += v
            self.value[1] += 1
        elif f == "min":
            self.value = v if self.value is None or v < self.value else self.value
        elif f == "max":
            self.value = v if self.value is None or v > self.value else self.value

    def merge(self, other_json) -> None:
        f = self.func
        if f == "count":
            if self.distinct:
                if self.exact:
                    self.value |= set(other_json)
                else:
                    self.value = self.value.merge(_sketch_from_json(other_json))
            else:
                self.value += other_json
            return
        if f == "avg":
            self.value[0] += other_json[0]
            self.value[1] += other_json[1]
            return
        if other_json is None:
            return
        if f == "sum":
            self.value = other_json if self.value is None else self.value + other_json
        elif f == "min":
            self.value = other_json if self.value is None or other_json < self.value else self.value
        elif f == "max":
            self.value = other_json if self.value is None or other_json > self.value else self.value

    def to_json(self):
        if self.func == "count" and self.distinct:
            return sorted(self.value) if self.exact else _sketch_to_json(self.value)
        return self.value

    def final(self):
        if self.func == "count":
            if not self.distinct:
                return self.value
            if self.exact:
                return len(self.value)
            return int(round(self.value.estimate()))
        if self.func == "avg":
            s, n = self.value
            return s / n if n else None
        return self.value


class Partial:
    """Accumulates one fragment's contribution under a partial spec."""

    def __init__(self, spec: dict, ordinal: int = 0):
        self.spec = spec
        self.mode = spec["mode"]
        self.ordinal = ordinal
        self._pos = 0
        if self.mode == "rows":
            self.rows: list[tuple] = []
        elif self.mode == "agg":
            self.states = [self._new_state(s) for s in spec["items"] if s["kind"] == "agg"]
        elif self.mode == "group":
            self.groups: dict[tuple, list[_AggState]] = {}
        elif self.mode == "topk":
            self.heap: list[tuple] = []  # (inverted sort key, ordinal, pos, row)
        else:
            raise ValueError(f"unknown partial mode {self.mode}")

    def _new_state(self, item: dict) -> _AggState:
        return _AggState(
            {
                "func": item["func"],
                "col": item["col"],
                "distinct": item["distinct"],
                "exact": self.spec.get("exact_distinct", False),
                "p": self.spec.get("distinct_precision", 12),
            }
        )

    def add(self, row: tuple) -> None:
        if self.mode == "rows":
            self.rows.append(row)
        elif self.mode == "agg":
            for st in self.states:
                st.add(row)
        elif self.mode == "group":
            key = tuple(row[c] for c in self.spec["group_cols"])
            states = self.groups.get(key)
            if states is None:
                states = [self._new_state(s) for s in self.spec["items"] if s["kind"] == "agg"]
                self.groups[key] = states
            for st in states:
                st.add(row)
        else:  # topk
            v = _orderable(row[self.spec["order_col"]])
            c0 = -v if self.spec["order_desc"] else v
            # min-heap of negated composite keys: the root is the worst kept
            # entry; composite (c0, ordinal, pos) is unique so rows never
            # get compared
            item = (-c0, -self.ordinal, -self._pos, row)
            k = self.spec["limit"]
            if k > 0:
                if len(self.heap) < k:
                    heapq.heappush(self.heap, item)
                else:
                    heapq.heappushpop(self.heap, item)
        self._pos += 1

    def to_json(self) -> dict:
        if self.mode == "rows":
            return {"mode": "rows", "ordinal": self.ordinal, "rows": [list(r) for r in self.rows]}
        if self.mode == "agg":
            return {"mode": "agg", "states": [st.to_json() for st in self.states]}
        if self.mode == "group":
            return {
                "mode": "group",
                "groups": [
                    [list(k), [st.to_json() for st in sts]] for k, sts in self.groups.items()
                ],
            }
        return {
            "mode": "topk",
            "entries": [[-n0, -n1, -n2, list(row)] for n0, n1, n2, row in self.heap],
        }


def _orderable(v):
    if isinstance(v, str):
        raise QueryError("ORDER BY on text attributes is not supported")
    return v


class Merger:
    """Combines fragment partials; every fragment contributes exactly once."""

    def __init__(self, plan):
        self.plan = plan
        self.spec = plan.partial_spec()
        self.mode = self.spec["mode"]
        self.seen: set = set()
        if self.mode == "rows":
            self._batches: list[tuple[int, list]] = []
        elif self.mode == "agg":
            self._acc = Partial(self.spec)
        elif self.mode == "group":
            self._groups: dict[tuple, list[_AggState]] = {}
        else:
            self._entries: list[tuple] = []

    def add(self, fragment_id: str, partial_json: dict) -> bool:
        """Returns False for duplicate fragments (hedged retries)."""
        if fragment_id in self.seen:
            return False
        self.seen.add(fragment_id)
        mode = partial_json["mode"]
        if mode != self.mode:
            raise QueryError(f"fragment partial mode {mode} does not match plan {self.mode}")
        if mode == "rows":
            self._batches.append(
                (partial_json["ordinal"], [tuple(r) for r in partial_json["rows"]])
            )
        elif mode == "agg":
            for st, other in zip(self._acc.states, partial_json["states"]):
                st.merge(other)
        elif mode == "group":
            for key_list, states_json in partial_json["groups"]:
                key = tuple(key_list)
                states = self._groups.get(key)
                if states is None:
                    states = [
                        self._acc_state(i) for i in self.spec["items"] if i["kind"] == "agg"
                    ]
                    self._groups[key] = states
                for st, other in zip(states, states_json):
                    st.merge(other)
        else:
            for key, ordinal, pos, row in partial_json["entries"]:
                self._entries.append((key, ordinal, pos, tuple(row)))
        return True

    def _acc_state(self, item: dict) -> _AggState:
        return _AggState(
            {
                "func": item["func"],
                "col": item["col"],
                "distinct": item["distinct"],
                "exact": self.spec.get("exact_distinct", False),
                "p": self.spec.get("distinct_precision", 12),
            }
        )

    def result(self, expected_fragments: set) -> list[tuple]:
        missing = expected_fragments - self.seen
        if missing:
            raise QueryError(f"incomplete result: missing fragments {sorted(missing)[:4]}")
        plan = self.plan
        if self.mode == "agg":
            return [tuple(st.final() for st in self._acc.states)]
        if self.mode == "group":
            out_rows = []
            for key in sorted(self._groups):
                states = iter(self._groups[key])
                row = []
                for item in self.spec["items"]:
                    if item["kind"] == "agg":
                        row.append(next(states).final())
                    else:
                        row.append(key[self.plan.group_cols.index(item["col"])])
                out_rows.append(tuple(row))
            if plan.order_col is not None:
                oc = self._group_output_order_col()
                out_rows.sort(key=lambda r: _orderable(r[oc]), reverse=plan.order_desc)
            if plan.limit is not None:
                out_rows = out_rows[: plan.limit]
            return out_rows
        if self.mode == "topk":
            self._entries.sort(key=lambda e: (e[0], e[1], e[2]))
            rows = [e[3] for e in self._entries[: plan.limit]]
            return [self._project(r) for r in rows]
        # rows mode: batches in ordinal order, rows in record order; a stable
        # value sort leaves ties in (ordinal, position) order
        self._batches.sort(key=lambda b: b[0])
        rows = [r for _, batch in self._batches for r in batch]
        if plan.order_col is not None:
            rows.sort(key=lambda r: _orderable(r[plan.order_col]), reverse=plan.order_desc)
        if plan.limit is not None:
            rows = rows[: plan.limit]
        return [self._project(r) for r in rows]

    def _group_output_order_col(self) -> int:
        for i, item in enumerate(self.spec["items"]):
            if item["kind"] == "column" and item["col"] == self.plan.order_col:
                return i
        raise QueryError("ORDER BY attribute is not in the select list of a grouped query")

    def _project(self, row: tuple) -> tuple:
        cols = [it["col"] for it in self.spec["items"]]
        return tuple(row[c] for c in cols)


def build_partial(spec: dict, ordinal: int, rows: list[tuple]) -> dict:
    """Reduce one fragment's combined rows into its partial JSON."""
    p = Partial(spec, ordinal)
    for r in rows:
        p.add(r)
    return p.to_json()


def join_rows(
    probe_rows: list[tuple], probe_key_col: int, build_map: dict, build_width: int
) -> list[tuple]:
    """Inner hash join: probe rows against the broadcast build table."""
    out = []
    for pr in probe_rows:
        matches = build_map.get(pr[probe_key_col])
        if matches:
            for br in matches:
                out.append(pr + tuple(br))
    return out


def build_map_from_rows(rows: list[tuple], key_col: int) -> dict:
    m: dict = {}
    for r in rows:
        m.setdefault(r[key_col], []).append(r)
    return m
