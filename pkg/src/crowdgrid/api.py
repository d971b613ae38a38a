"""HTTP + event-stream service over a market session.

Read endpoints are open; every mutating call carries a bearer token issued
at enrollment.  Responses to offers are signed and ordered onto the ledger
before the call acknowledges, so an ack always names the committing block.
Clients resume the event stream from their last acknowledged event id.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import threading

from fastapi import Depends, FastAPI, Header, HTTPException, Query
from fastapi.responses import StreamingResponse

from .ledger import OPERATOR, OfferResponse, make_tx, validate_chain
from .network import network_to_json
from .orchestrator import MarketSession, SessionError


def _token_for(seed: int, party: str) -> str:
    return hashlib.sha256(f"cg-token:{seed}:{party}".encode()).hexdigest()[:40]


class SessionGate:
    """Serializes mutating access to one session and owns the token table."""

    def __init__(self, session: MarketSession):
        self.session = session
        self.lock = threading.Lock()
        self.tokens: dict[str, str] = {
            _token_for(session.cfg.seed, OPERATOR): OPERATOR}

    def operator_token(self) -> str:
        return _token_for(self.session.cfg.seed, OPERATOR)

    def enroll(self, party: str) -> dict:
        with self.lock:
            known = self.session.parties()
            if party not in known:
                raise HTTPException(404, detail={"code": "unknown-participant",
                                                 "participant": party})
            token = _token_for(self.session.cfg.seed, party)
            if token in self.tokens and self.session.ledger.state.public_key(party):
                raise HTTPException(409, detail={"code": "already-enrolled",
                                                 "participant": party})
            kp = self.session.key_for(party)
            if self.session.ledger.state.public_key(party) is None:
                from .ledger import Enrollment

                self.session.submit(make_tx(Enrollment, party, self.session.clock, kp,
                                            participant=party, public_key=kp.public))
                self.session.flush()
            self.tokens[token] = party
            return {"participant": party, "token": token,
                    "public_key": kp.public.hex(), "secret_key": kp.secret.hex()}


def create_app(session: MarketSession) -> FastAPI:
    gate = SessionGate(session)
    app = FastAPI(title="crowdgrid", version="0.1.0")
    app.state.gate = gate

    def auth(authorization: str = Header(default="")) -> str:
        token = authorization.removeprefix("Bearer ").strip()
        party = gate.tokens.get(token)
        if party is None:
            raise HTTPException(401, detail={"code": "auth-failure"})
        return party

    @app.get("/health")
    def health():
        return {"ok": True, "period": session.current_period,
                "height": session.ledger.height, "clock": session.clock,
                "horizon": session.scenario.horizon}

    @app.post("/enroll")
    def enroll(body: dict):
        return gate.enroll(body.get("participant", ""))

    @app.get("/network")
    def get_network():
        return network_to_json(session.scenario.network)

    @app.get("/dlmp")
    def get_dlmp(period: int = Query(ge=0)):
        if session.dlmp is None:
            raise HTTPException(409, detail={"code": "day-ahead-not-run"})
        if period >= session.scenario.horizon:
            raise HTTPException(404, detail={"code": "unknown-period"})
        return {"period": period,
                "dlmp_per_mwh": {str(b): float(session.dlmp[period, i])
                                 for i, b in enumerate(session.day_ahead.bus_ids)}}

    @app.get("/offers")
    def get_offers(party: str = Depends(auth)):
        state = session.ledger.state
        mine = state.open_offers(None if party == OPERATOR else party)
        return {"offers": mine}

    @app.post("/offers/{offer_id}/response")
    def respond(offer_id: str, body: dict, party: str = Depends(auth)):
        decision = body.get("decision", "")
        if decision not in ("accept", "reject"):
            raise HTTPException(422, detail={"code": "bad-decision"})
        with gate.lock:
            offer = session.ledger.state.offer(offer_id)
            if offer is None:
                raise HTTPException(404, detail={"code": "not-found"})
            if offer["crowdsourcee"] != party and party != OPERATOR:
                raise HTTPException(403, detail={"code": "forbidden"})
            if offer["status"] != "open":
                raise HTTPException(409, detail={"code": "duplicate"})
            if session.clock > offer["expiry"]:
                raise HTTPException(410, detail={"code": "expired"})
            submitter = offer["crowdsourcee"]
            session.submit(make_tx(OfferResponse, submitter, session.clock,
                                   session.key_for(submitter),
                                   offer_id=offer_id, decision=decision))
            events = session.flush()
            rejected = [e for e in events if e["type"] == "rejected"]
            if rejected:
                raise HTTPException(409, detail={"code": rejected[0]["code"]})
            return {"ok": True, "offer_id": offer_id, "decision": decision,
                    "committed_height": session.ledger.height}

    @app.post("/preferences")
    def preferences(body: dict, party: str = Depends(auth)):
        import json as _json

        from .ledger import PreferenceUpdate

        with gate.lock:
            session.submit(make_tx(
                PreferenceUpdate, party, session.clock, session.key_for(party),
                owner=party, payload_json=_json.dumps(body, sort_keys=True)))
            session.flush()
            return {"ok": True, "committed_height": session.ledger.height}

    @app.get("/events")
    def events(after: int = -1, party: str = Depends(auth)):
        out = [ev for ev in session.events if ev["event_id"] > after
               and _visible(ev, party)]
        return {"events": out, "last_id": session.events[-1]["event_id"]
                if session.events else -1}

    @app.get("/events/stream")
    async def stream(party: str = Depends(auth), once: bool = False,
                     last_event_id: str = Header(default="-1")):
        """Server-push event stream; reconnects resume from Last-Event-ID.
        ``once=true`` closes after the current backlog (curl/test friendly)."""
        try:
            cursor = int(last_event_id)
        except ValueError:
            cursor = -1

        async def gen():
            nonlocal cursor
            while True:
                batch = [ev for ev in session.events if ev["event_id"] > cursor
                         and _visible(ev, party)]
                for ev in batch:
                    cursor = ev["event_id"]
                    payload = json.dumps(ev, sort_keys=True)
                    yield f"id: {ev['event_id']}\ndata: {payload}\n\n"
                if once:
                    return
                await asyncio.sleep(0.1)

        return StreamingResponse(gen(), media_type="text/event-stream")

    def _visible(ev: dict, party: str) -> bool:
        if party == OPERATOR:
            return True
        subject = ev.get("crowdsourcee") or ev.get("party") or ev.get("participant")
        return subject is None or subject == party

    @app.get("/ledger/blocks")
    def blocks(start: int = 0, limit: int = 100):
        out = []
        for block in session.ledger.blocks[start:start + limit]:
            out.append({
                "height": block.height,
                "hash": block.block_hash.hex(),
                "prev_hash": block.prev_hash.hex(),
                "timestamp": block.timestamp,
                "tx_count": len(block.txs),
                "txs": [{"tx_id": tx.tx_id, "type": type(tx).__name__,
                         "submitter": tx.submitter} for tx in block.txs],
            })
        return {"height": session.ledger.height, "blocks": out}

    @app.get("/ledger/state")
    def state():
        return {"state_hash": session.ledger.state_hash().hex(),
                "kv": session.ledger.state.kv}

    @app.get("/ledger/verify")
    def verify():
        bad = validate_chain(session.ledger.blocks)
        return {"ok": bad is None, "first_bad_height": bad}

    @app.get("/session")
    def session_view(party: str = Depends(auth)):
        if party != OPERATOR:
            raise HTTPException(403, detail={"code": "forbidden"})
        return session.report()

    @app.post("/operator/advance")
    def advance(party: str = Depends(auth)):
        if party != OPERATOR:
            raise HTTPException(403, detail={"code": "forbidden"})
        with gate.lock:
            try:
                return _advance(session)
            except SessionError as exc:
                raise HTTPException(409, detail={"code": "session-error",
                                                 "message": str(exc)})

    @app.post("/operator/reconcile")
    def reconcile(party: str = Depends(auth)):
        if party != OPERATOR:
            raise HTTPException(403, detail={"code": "forbidden"})
        with gate.lock:
            return {"settled": session.reconcile()}

    return app


def _advance(session: MarketSession) -> dict:
    """Operator state machine: day-ahead, then open/close each period."""
    if session.day_ahead is None:
        sol = session.run_day_ahead()
        return {"phase": "day-ahead", "objective": sol.objective,
                "status": sol.status}
    t = session.current_period
    if t >= 0 and t not in session._closed:
        outcome = session.close_period(t)
        return {"phase": "closed", "outcome": outcome.to_json()}
    nxt = t + 1
    if nxt >= session.scenario.horizon:
        settled = session.reconcile()
        return {"phase": "reconciled", "settled": settled}
    outcome = session.open_period(nxt)
    return {"phase": "opened", "outcome": outcome.to_json()}
