// Payload shapes mirrored from the HTTP service. Prices and quantities are
// kept exactly as received; formatting happens only at render time.

export interface Credential {
  participant: string;
  token: string;
  public_key: string;
  secret_key: string;
}

export interface Offer {
  offer_id: string;
  crowdsourcee: string;
  period: number;
  quantity: number;
  price: number; // nodal price + reward, $/MWh
  premium: number;
  expiry: number; // logical tick
  status: string;
}

export type OfferStatus =
  | "open"
  | "accepted"
  | "rejected"
  | "expired"
  | "settled"
  | `committed at block ${number}`;

export interface OfferCard {
  offer_id: string;
  period: number;
  quantity: number;
  price: number;
  premium: number;
  expiry: number;
  status: OfferStatus;
  committedHeight?: number;
}

export interface LedgerEvent {
  event_id: number;
  height: number;
  type: string;
  [key: string]: unknown;
}

export interface BlockSummary {
  height: number;
  hash: string;
  prev_hash: string;
  timestamp: number;
  tx_count: number;
  txs: { tx_id: string; type: string; submitter: string }[];
}

export interface Health {
  ok: boolean;
  period: number;
  height: number;
  clock: number;
  horizon: number;
}

export interface RoundStatus {
  period: number;
  d_t: number;
  accepted_quantity: number;
  accepted_premium: number;
  fallback: number;
  shortfall: number;
  escalation_rounds: number;
}

export interface VerifyResult {
  ok: boolean;
  first_bad_height: number | null;
}
