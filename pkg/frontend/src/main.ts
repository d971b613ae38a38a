import { ApiClient } from "./api.js";
import { EventFeed } from "./events.js";
import {
  renderBudgetBar,
  renderDlmpTable,
  renderInbox,
  renderLedger,
  renderPreferenceEditor,
  renderRounds,
} from "./render.js";
import { applyEvent, expireOffers, initialState } from "./state.js";
import type { VerifyResult } from "./types.js";

// Thin wiring layer: everything the page shows derives from API responses
// and the event feed; accept/decline/save call the service and re-render
// from committed state, never optimistically.

const qs = new URLSearchParams(location.search);
const base = qs.get("api") ?? "http://127.0.0.1:8000";
const role = qs.get("role") ?? "crowdsourcee";
const party = qs.get("party") ?? "bus-2";

const api = new ApiClient(base, qs.get("token"));
const feed = new EventFeed(api);
const state = initialState();
let clock = 0;
let lastVerify: VerifyResult | null = null;

const root = document.getElementById("app") as HTMLElement;

function renderCrowdsourcee() {
  root.innerHTML = renderInbox(state, clock) + renderPreferenceEditor();
  for (const btn of root.querySelectorAll<HTMLButtonElement>("[data-accept]")) {
    btn.onclick = () => respond(btn.dataset.accept as string, "accept");
  }
  for (const btn of root.querySelectorAll<HTMLButtonElement>("[data-reject]")) {
    btn.onclick = () => respond(btn.dataset.reject as string, "reject");
  }
  const save = root.querySelector<HTMLButtonElement>("#pref-save");
  if (save) save.onclick = () => void savePreferences();
}

async function renderOperator() {
  const health = await api.health();
  clock = health.clock;
  const period = Math.max(0, Math.min(health.period, health.horizon - 1));
  let dlmpHtml = "<p>Day-ahead not solved yet.</p>";
  try {
    dlmpHtml = renderDlmpTable(period, await api.dlmp(period));
  } catch {
    // day-ahead not run yet
  }
  const blocks = await api.blocks(Math.max(0, health.height - 24));
  const budget = renderBudgetBar(state.premiumCommitted, 0, budgetMax);
  root.innerHTML = dlmpHtml + budget + renderRounds(state)
    + renderLedger(blocks.height, blocks.blocks.reverse(), lastVerify);
  const btn = root.querySelector<HTMLButtonElement>("#verify-btn");
  if (btn) {
    btn.onclick = async () => {
      lastVerify = await api.verifyLedger();
      await renderOperator();
    };
  }
}

let budgetMax = 50;

async function respond(offerId: string, decision: "accept" | "reject") {
  try {
    await api.respond(offerId, decision);
  } catch (err) {
    alert(`response failed: ${(err as Error).message}`);
  }
  // the committed state arrives on the event feed; render happens there
  await feed.pull();
  renderCrowdsourcee();
}

async function savePreferences() {
  const num = (id: string) =>
    Number((document.getElementById(id) as HTMLInputElement).value || 0);
  await api.updatePreferences({
    u_max: num("pref-umax"),
    window: [num("pref-start"), num("pref-end")],
  });
}

async function start() {
  if (!api.token && role === "crowdsourcee") {
    await api.enroll(party);
  }
  feed.onEvent((ev) => {
    applyEvent(state, ev);
  });
  feed.start();
  setInterval(async () => {
    const health = await api.health().catch(() => null);
    if (health) {
      clock = health.clock;
      expireOffers(state, clock);
    }
    if (role === "operator") await renderOperator().catch(() => undefined);
    else renderCrowdsourcee();
  }, 1000);
}

void start();
