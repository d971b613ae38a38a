import type { AppState } from "./state.js";
import type { BlockSummary, OfferCard, VerifyResult } from "./types.js";

// Render functions return HTML strings so they are testable without a DOM.
// Numbers shown to humans are formatted here and only here; the stored
// state keeps API values untouched.

const esc = (s: unknown) =>
  String(s).replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");

export function renderOfferCard(card: OfferCard, clock: number): string {
  const open = card.status === "open";
  const remaining = Math.max(0, card.expiry - clock);
  const countdown = open ? `expires in ${remaining} ticks` : esc(card.status);
  const actions = open
    ? `<button data-accept="${esc(card.offer_id)}">Accept</button>
       <button data-reject="${esc(card.offer_id)}">Decline</button>`
    : `<button disabled>Accept</button> <button disabled>Decline</button>`;
  return `<div class="offer" id="offer-${esc(card.offer_id)}" data-status="${esc(card.status)}">
  <strong>${esc(card.offer_id)}</strong>
  <span>period ${card.period}</span>
  <span>${card.quantity.toFixed(4)} MW @ ${card.price.toFixed(4)} $/MWh</span>
  <span class="countdown">${countdown}</span>
  ${actions}
</div>`;
}

export function renderInbox(state: AppState, clock: number): string {
  const cards = [...state.offers.values()]
    .sort((a, b) => b.offer_id.localeCompare(a.offer_id))
    .map((c) => renderOfferCard(c, clock));
  return `<section id="inbox"><h2>Offers</h2>${cards.join("\n") || "<p>No offers yet.</p>"}</section>`;
}

export function renderDlmpTable(period: number, prices: Record<string, number>): string {
  const rows = Object.entries(prices)
    .sort(([a], [b]) => Number(a) - Number(b))
    .map(([bus, lam]) => `<tr><td>bus ${esc(bus)}</td><td>${lam.toFixed(4)}</td></tr>`)
    .join("");
  return `<table id="dlmp" data-period="${period}">
<thead><tr><th>bus</th><th>$/MWh (period ${period})</th></tr></thead>
<tbody>${rows}</tbody></table>`;
}

export function renderBudgetBar(spent: number, bMin: number, bMax: number): string {
  const clamped = Math.min(spent, bMax);
  const pct = bMax > 0 ? Math.round((clamped / bMax) * 100) : 0;
  return `<div id="budget" data-spent="${spent.toFixed(6)}" data-max="${bMax}">
  <div class="bar" style="width:${pct}%"></div>
  <span>${spent.toFixed(2)} of [${bMin.toFixed(2)}, ${bMax.toFixed(2)}] $/h</span>
</div>`;
}

export function renderRounds(state: AppState): string {
  const rows = [...state.rounds.values()]
    .sort((a, b) => a.period - b.period)
    .map((r) => `<tr><td>${r.period}</td><td>${r.d_t.toFixed(4)}</td>
<td>${r.accepted_quantity.toFixed(4)}</td><td>${r.fallback.toFixed(4)}</td>
<td>${r.escalation_rounds}</td></tr>`)
    .join("");
  const notices = state.notices
    .map((n) => `<li class="notice">${esc(n.topic)} @ period ${n.period}: ${esc(n.detail)}</li>`)
    .join("");
  return `<section id="rounds"><h2>Rounds</h2>
<table><thead><tr><th>period</th><th>shortage MW</th><th>accepted</th><th>fallback</th><th>escalations</th></tr></thead>
<tbody>${rows}</tbody></table><ul id="notices">${notices}</ul></section>`;
}

export function renderLedger(height: number, blocks: BlockSummary[],
                             verify: VerifyResult | null): string {
  const rows = blocks
    .map((b) => `<tr id="block-${b.height}"><td>${b.height}</td>
<td><code>${esc(b.hash.slice(0, 16))}</code></td><td>${b.tx_count}</td>
<td>${b.txs.map((t) => esc(t.type)).join(", ")}</td></tr>`)
    .join("");
  const badge = verify === null
    ? ""
    : verify.ok
      ? `<span id="verify-result" class="ok">chain ok</span>`
      : `<span id="verify-result" class="bad">first bad height ${verify.first_bad_height}</span>`;
  return `<section id="ledger"><h2>Ledger (height ${height})</h2>
<button id="verify-btn">Validate chain</button> ${badge}
<table><thead><tr><th>height</th><th>hash</th><th>txs</th><th>types</th></tr></thead>
<tbody>${rows}</tbody></table></section>`;
}

export function renderPreferenceEditor(): string {
  return `<section id="preferences"><h2>Preferences</h2>
<label>max offer quantity (MW) <input id="pref-umax" type="number" step="0.01"></label>
<label>window start <input id="pref-start" type="number" min="0" max="23"></label>
<label>window end <input id="pref-end" type="number" min="1" max="24"></label>
<button id="pref-save">Save constraints</button></section>`;
}
