import type { BlockSummary, Credential, Health, LedgerEvent, Offer, VerifyResult } from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, public code: string, message?: string) {
    super(message ?? code);
  }
}

async function parseError(res: Response): Promise<never> {
  let code = `http-${res.status}`;
  try {
    const body = await res.json();
    code = body?.detail?.code ?? code;
  } catch {
    // non-JSON error body; keep the status code
  }
  throw new ApiError(res.status, code);
}

export class ApiClient {
  constructor(public base: string, public token: string | null = null,
              private fetchFn: typeof fetch = fetch) {}

  private headers(): Record<string, string> {
    const h: Record<string, string> = { "content-type": "application/json" };
    if (this.token) h.authorization = `Bearer ${this.token}`;
    return h;
  }

  private async get<T>(path: string): Promise<T> {
    const res = await this.fetchFn(`${this.base}${path}`, { headers: this.headers() });
    if (!res.ok) await parseError(res);
    return res.json() as Promise<T>;
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const res = await this.fetchFn(`${this.base}${path}`, {
      method: "POST",
      headers: this.headers(),
      body: JSON.stringify(body),
    });
    if (!res.ok) await parseError(res);
    return res.json() as Promise<T>;
  }

  health(): Promise<Health> {
    return this.get("/health");
  }

  async enroll(participant: string): Promise<Credential> {
    const cred = await this.post<Credential>("/enroll", { participant });
    this.token = cred.token;
    return cred;
  }

  offers(): Promise<Offer[]> {
    return this.get<{ offers: Offer[] }>("/offers").then((b) => b.offers);
  }

  respond(offerId: string, decision: "accept" | "reject") {
    return this.post<{ ok: boolean; committed_height: number }>(
      `/offers/${offerId}/response`, { decision });
  }

  dlmp(period: number): Promise<Record<string, number>> {
    return this.get<{ dlmp_per_mwh: Record<string, number> }>(
      `/dlmp?period=${period}`).then((b) => b.dlmp_per_mwh);
  }

  events(after: number): Promise<{ events: LedgerEvent[]; last_id: number }> {
    return this.get(`/events?after=${after}`);
  }

  blocks(start = 0, limit = 200): Promise<{ height: number; blocks: BlockSummary[] }> {
    return this.get(`/ledger/blocks?start=${start}&limit=${limit}`);
  }

  verifyLedger(): Promise<VerifyResult> {
    return this.get("/ledger/verify");
  }

  updatePreferences(payload: Record<string, unknown>) {
    // constraint payloads ride the session's preference channel at the next
    // round; the service records them on the ledger
    return this.post("/preferences", payload);
  }

  advance(): Promise<{ phase: string }> {
    return this.post("/operator/advance", {});
  }

  sessionReport(): Promise<Record<string, unknown>> {
    return this.get("/session");
  }
}
