"""Deterministic mock tools for the over-temperature diagnosis scenario.

Arithmetic goes through :class:`~decimal.Decimal` on the string form of
every input, and results are quantized before they are turned back into
floats, so outputs are identical on every platform.
"""

from __future__ import annotations

from decimal import Decimal, InvalidOperation
from typing import Any, Callable, Mapping

from ..canonical import hash_doc
from ..contracts import FieldSchema
from ..gateway import AdapterResult

Q4 = Decimal("0.0001")


def _dec(value: Any) -> Decimal:
    return Decimal(str(value))


def _num(value: Decimal, q: Decimal = Q4) -> float:
    return float(value.quantize(q))


def thermal_features(series: list[Mapping[str, Any]], hotspots: int) -> dict:
    temps = [_dec(s["temp"]) for s in series]
    if len(temps) < 2:
        slope = Decimal(0)
    else:
        slope = (temps[-1] - temps[0]) / (len(temps) - 1)
    return {"max_temp": _num(max(temps)), "temp_slope": _num(slope), "hotspot_count": int(hotspots)}


def twin_risk(table: Mapping[str, Any], features: Mapping[str, Any], derate_fraction: Any) -> float:
    """clamp(bias + sum(w_i * f_i) - relief * derate_fraction, 0, 1)"""
    total = _dec(table["bias"])
    for name in sorted(table["weights"]):
        total += _dec(table["weights"][name]) * _dec(features[name])
    total -= _dec(table["derate_relief"]) * _dec(derate_fraction)
    return _num(min(max(total, Decimal(0)), Decimal(1)))


class MockToolSet:
    """Adapters for every scenario tool, sharing one fixture set.

    Actuators keep per-asset state (current derate, open tickets) so that
    compensations can be checked against what they undo.
    """

    def __init__(self, fixtures: Mapping[str, Any]) -> None:
        self.thermal = fixtures["thermal"]
        self.firmware = fixtures["firmware"]
        self.risk_table = fixtures["risk_table"]
        self.derates: dict[str, float] = {}
        self.tickets: dict[str, dict] = {}

    def adapters(self) -> dict[str, Callable]:
        return {
            "telemetry_query": self.telemetry_query,
            "firmware_status": self.firmware_status,
            "twin_simulate": self.twin_simulate,
            "derate_command": self.derate_command,
            "restore_command": self.restore_command,
            "schedule_service": self.schedule_service,
            "cancel_service": self.cancel_service,
            "calc": calc,
        }

    def telemetry_query(self, args, budget, seed) -> AdapterResult:
        asset = self.thermal["assets"].get(args["asset_id"])
        if asset is None:
            return AdapterResult(None, "unknown_asset", 1)
        series = asset["series"][-args["window"]:]
        if args.get("resolution") == "coarse":
            series = series[::2]
        return AdapterResult(
            {
                "asset_id": args["asset_id"],
                "resolution": args.get("resolution", "fine"),
                "samples": len(series),
                "features": thermal_features(series, asset.get("hotspots", 0)),
            },
            None,
            2,
        )

    def firmware_status(self, args, budget, seed) -> AdapterResult:
        fw = self.firmware["assets"].get(args["asset_id"])
        if fw is None:
            return AdapterResult(None, "unknown_asset", 1)
        return AdapterResult({"asset_id": args["asset_id"], **fw}, None, 1)

    def twin_simulate(self, args, budget, seed) -> AdapterResult:
        risk = twin_risk(self.risk_table, args["features"], args.get("derate_fraction", 0))
        return AdapterResult(
            {
                "asset_id": args["asset_id"],
                "risk": risk,
                "derate_fraction": args.get("derate_fraction", 0),
                "recommended_derate": self.risk_table["recommended_derate"],
                "model_version": self.risk_table.get("version", "twin"),
            },
            None,
            3,
        )

    def derate_command(self, args, budget, seed) -> AdapterResult:
        previous = self.derates.get(args["asset_id"], 0.0)
        self.derates[args["asset_id"]] = args["fraction"]
        return AdapterResult(
            {"asset_id": args["asset_id"], "fraction": args["fraction"], "previous_fraction": previous}, None, 1
        )

    def restore_command(self, args, budget, seed) -> AdapterResult:
        self.derates[args["asset_id"]] = args["fraction"]
        return AdapterResult({"asset_id": args["asset_id"], "fraction": args["fraction"]}, None, 1)

    def schedule_service(self, args, budget, seed) -> AdapterResult:
        ticket_id = "TCK-" + hash_doc({"args": dict(args), "seed": seed})[:8].upper()
        self.tickets[ticket_id] = dict(args)
        return AdapterResult({"ticket_id": ticket_id, "priority": args["priority"], "asset_id": args["asset_id"]}, None, 1)

    def cancel_service(self, args, budget, seed) -> AdapterResult:
        existed = self.tickets.pop(args["ticket_id"], None) is not None
        return AdapterResult({"ticket_id": args["ticket_id"], "cancelled": existed}, None, 1)


def calc(args, budget, seed) -> AdapterResult:
    """Fixed-arithmetic evaluator: add, sub, mul, div on decimals."""
    try:
        a, b = _dec(args["a"]), _dec(args["b"])
        op = args["op"]
        if op == "add":
            value = a + b
        elif op == "sub":
            value = a - b
        elif op == "mul":
            value = a * b
        elif op == "div":
            if b == 0:
                return AdapterResult(None, "division_by_zero", 1)
            value = a / b
        else:
            return AdapterResult(None, "unknown_op", 1)
    except (InvalidOperation, KeyError):
        return AdapterResult(None, "bad_operand", 1)
    return AdapterResult({"value": _num(value, Decimal("0.000001"))}, None, 1)


_FEATURES = (
    FieldSchema("max_temp", "decimal"),
    FieldSchema("temp_slope", "decimal"),
    FieldSchema("hotspot_count", "integer", minimum=0),
)

# Shape each adapter's result must have; checked by the kernel before use.
RESULT_SCHEMAS: dict[str, tuple[FieldSchema, ...]] = {
    "telemetry_query": (
        FieldSchema("asset_id", "text"),
        FieldSchema("features", "nested-document", children=_FEATURES),
    ),
    "firmware_status": (
        FieldSchema("asset_id", "text"),
        FieldSchema("firmware_version", "text"),
    ),
    "twin_simulate": (
        FieldSchema("risk", "decimal", minimum=0, maximum=1),
        FieldSchema("recommended_derate", "decimal", minimum=0, maximum=1),
    ),
    "derate_command": (FieldSchema("fraction", "decimal"), FieldSchema("previous_fraction", "decimal")),
    "restore_command": (FieldSchema("fraction", "decimal"),),
    "schedule_service": (FieldSchema("ticket_id", "text"),),
    "cancel_service": (FieldSchema("cancelled", "boolean"),),
    "calc": (FieldSchema("value", "decimal"),),
}
