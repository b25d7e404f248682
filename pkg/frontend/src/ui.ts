/** DOM rendering: the whole view is rebuilt from AppState on every change. */

import type { CelestialClient } from './api.js';
import { canRefine, effectiveVerdict, type AppState } from './store.js';

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;');
}

function jobBanner(state: AppState): string {
  if (!state.job) return '';
  const { status, error } = state.job;
  const text =
    status === 'failed' ? `refinement failed: ${error ?? 'unknown error'}` : `refinement ${status}`;
  return `<div id="job-banner" class="banner ${status}" data-status="${status}">${escapeHtml(text)}</div>`;
}

function card(state: AppState, client: CelestialClient, index: number): string {
  const row = state.results[index];
  const verdict = effectiveVerdict(state, row.id);
  const classes = ['card'];
  if (verdict) classes.push(verdict === 'approve' ? 'approved' : 'declined');
  return `
    <figure class="${classes.join(' ')}" data-id="${escapeHtml(row.id)}" data-rank="${index + 1}">
      <img src="${escapeHtml(client.imageUrl(row.thumbnail))}" alt="${escapeHtml(row.id)}" loading="lazy">
      <figcaption>
        <span class="item-id">${escapeHtml(row.id)}</span>
        <span class="item-score">${row.score.toFixed(3)}</span>
      </figcaption>
      <div class="verdict-buttons">
        <button type="button" class="approve${verdict === 'approve' ? ' active' : ''}"
                data-action="approve" data-id="${escapeHtml(row.id)}"
                aria-pressed="${verdict === 'approve'}">approve</button>
        <button type="button" class="decline${verdict === 'decline' ? ' active' : ''}"
                data-action="decline" data-id="${escapeHtml(row.id)}"
                aria-pressed="${verdict === 'decline'}">decline</button>
      </div>
    </figure>`;
}

export function render(container: HTMLElement, state: AppState, client: CelestialClient): void {
  const cards = state.results.map((_, i) => card(state, client, i)).join('\n');
  container.innerHTML = `
    <header class="top">
      <h1>celestial</h1>
      <div class="session-strip">
        <span id="session-id">${escapeHtml(state.sessionId ?? 'no session')}</span>
        <span id="generation" class="badge" data-generation="${state.generation}">
          gen ${state.generation}
        </span>
      </div>
    </header>
    <section class="query-strip">
      <input id="query-id" type="text" placeholder="corpus image id"
             value="${escapeHtml(state.lastQuery?.imageId ?? '')}">
      <input id="query-k" type="number" min="1" value="${state.lastQuery?.k ?? 12}">
      <button id="search-btn" type="button"${state.searching ? ' disabled' : ''}>search</button>
      <label class="upload-label">or upload
        <input id="query-file" type="file" accept="image/*">
      </label>
      <button id="refine-btn" type="button"${canRefine(state) ? '' : ' disabled'}>refine</button>
      <span id="query-label">${escapeHtml(state.queryLabel ?? '')}</span>
    </section>
    ${jobBanner(state)}
    ${state.toast ? `<div id="toast" role="alert">${escapeHtml(state.toast)}</div>` : ''}
    <main id="grid" class="grid">${cards}</main>`;
}
