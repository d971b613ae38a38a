import type { LedgerEvent, OfferCard, RoundStatus } from "./types.js";

// All UI state derives from the event feed plus read endpoints; applying
// the same event twice is a no-op, so a reload that replays the full feed
// reconstructs identical state.

export interface AppState {
  offers: Map<string, OfferCard>;
  rounds: Map<number, RoundStatus>;
  settlements: { party: string; amount_cents: number; height: number }[];
  notices: { topic: string; period: number; detail: string }[];
  premiumCommitted: number; // sum of accepted premiums ($/h), budget bar input
  lastEventId: number;
}

export function initialState(): AppState {
  return { offers: new Map(), rounds: new Map(), settlements: [], notices: [],
           premiumCommitted: 0, lastEventId: -1 };
}

export function applyEvent(state: AppState, ev: LedgerEvent): AppState {
  if (ev.event_id <= state.lastEventId) return state; // idempotent replay
  state.lastEventId = ev.event_id;
  switch (ev.type) {
    case "offer": {
      state.offers.set(ev.offer_id as string, {
        offer_id: ev.offer_id as string,
        period: ev.period as number,
        quantity: ev.quantity as number,
        price: ev.price as number,
        premium: ev.premium as number,
        expiry: ev.expiry as number,
        status: "open",
      });
      break;
    }
    case "response": {
      const card = state.offers.get(ev.offer_id as string);
      if (card) {
        const accepted = ev.decision === "accept";
        card.status = accepted ? `committed at block ${ev.height as number}` : "rejected";
        card.committedHeight = accepted ? (ev.height as number) : undefined;
        if (accepted) state.premiumCommitted += card.premium * card.quantity;
      }
      break;
    }
    case "settlement": {
      state.settlements.push({
        party: ev.party as string,
        amount_cents: ev.amount_cents as number,
        height: ev.height as number,
      });
      const card = [...state.offers.values()];
      void card;
      break;
    }
    case "notice": {
      state.notices.push({
        topic: ev.topic as string,
        period: ev.period as number,
        detail: ev.detail as string,
      });
      break;
    }
    default:
      break; // enrolled/contract/meter/etc. need no view-model change
  }
  return state;
}

export function applyRound(state: AppState, round: RoundStatus): AppState {
  state.rounds.set(round.period, round);
  return state;
}

export function expireOffers(state: AppState, clock: number): AppState {
  for (const card of state.offers.values()) {
    if (card.status === "open" && clock > card.expiry) card.status = "expired";
  }
  return state;
}

export function openOffers(state: AppState): OfferCard[] {
  return [...state.offers.values()]
    .filter((c) => c.status === "open")
    .sort((a, b) => a.offer_id.localeCompare(b.offer_id));
}

export function replay(events: LedgerEvent[]): AppState {
  const state = initialState();
  for (const ev of events) applyEvent(state, ev);
  return state;
}
