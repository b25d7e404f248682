/** App wiring: events -> API calls -> state transitions -> re-render. */

import { ApiError, CelestialClient, type Verdict } from './api.js';
import {
  applyJob,
  applyOptimistic,
  applySearch,
  applySession,
  canRefine,
  confirmFeedback,
  initialState,
  rollbackFeedback,
  setSearching,
  setToast,
  type AppState,
} from './store.js';
import { render } from './ui.js';

const SESSION_KEY = 'celestial.session';
const QUERY_KEY = 'celestial.lastQuery';

type MiniStorage = Pick<Storage, 'getItem' | 'setItem' | 'removeItem'>;

export interface AppHandle {
  search(imageId: string, k: number): Promise<void>;
  destroy(): void;
  getState(): AppState;
  /** Resolves once the restore-from-storage pass has finished. */
  ready: Promise<void>;
}

export interface MountOptions {
  storage?: MiniStorage;
  pollIntervalMs?: number;
}

export function mountApp(
  container: HTMLElement,
  client: CelestialClient,
  options: MountOptions = {},
): AppHandle {
  const storage = options.storage ?? window.localStorage;
  const pollIntervalMs = options.pollIntervalMs ?? 250;

  let state = initialState();
  let searchController: AbortController | null = null;
  let pollTimer: ReturnType<typeof setInterval> | null = null;
  let destroyed = false;

  function update(next: AppState): void {
    state = next;
    if (!destroyed) render(container, state, client);
  }

  async function search(imageId: string, k: number): Promise<void> {
    searchController?.abort(); // a newer search supersedes any in-flight one
    const controller = new AbortController();
    searchController = controller;
    update(setSearching(state, true));
    try {
      const response = await client.searchById(imageId, k, state.sessionId, {
        signal: controller.signal,
      });
      if (controller.signal.aborted) return;
      storage.setItem(SESSION_KEY, response.session_id);
      storage.setItem(QUERY_KEY, JSON.stringify({ imageId, k }));
      update(applySearch(state, response, { imageId, k }, imageId));
    } catch (error) {
      if (controller.signal.aborted) return;
      update(setSearching(setToast(state, describe(error)), false));
    }
  }

  async function searchUpload(file: File, k: number): Promise<void> {
    searchController?.abort();
    const controller = new AbortController();
    searchController = controller;
    update(setSearching(state, true));
    try {
      const response = await client.searchUpload(file, k, state.sessionId, controller.signal);
      if (controller.signal.aborted) return;
      storage.setItem(SESSION_KEY, response.session_id);
      // uploads cannot be re-run from storage, so the last query is cleared
      storage.removeItem(QUERY_KEY);
      update(applySearch(state, response, null, `upload: ${file.name}`));
    } catch (error) {
      if (controller.signal.aborted) return;
      // inline error; the grid keeps its previous contents
      update(setSearching(setToast(state, describe(error)), false));
    }
  }

  async function feedback(itemId: string, verdict: Verdict): Promise<void> {
    if (!state.sessionId) return;
    update(applyOptimistic(state, itemId, verdict));
    try {
      await client.sendFeedback(state.sessionId, itemId, verdict);
      update(confirmFeedback(state, itemId, verdict));
    } catch (error) {
      update(rollbackFeedback(state, itemId, describe(error)));
    }
  }

  function watchJob(jobId: string): void {
    stopPolling();
    pollTimer = setInterval(async () => {
      try {
        const job = await client.getJob(jobId);
        update(applyJob(state, job));
        if (job.status === 'done') {
          stopPolling();
          await onRefinementDone();
        } else if (job.status === 'failed') {
          stopPolling(); // banner keeps the failure reason
        }
      } catch {
        // transient poll errors: keep trying until destroy()
      }
    }, pollIntervalMs);
  }

  async function onRefinementDone(): Promise<void> {
    if (!state.sessionId) return;
    const session = await client.getSession(state.sessionId);
    update(applySession(state, session));
    if (state.lastQuery) {
      await search(state.lastQuery.imageId, state.lastQuery.k);
    }
  }

  async function refine(): Promise<void> {
    if (!state.sessionId || !canRefine(state)) return;
    try {
      const job = await client.startRefinement(state.sessionId);
      update({ ...state, job: { id: job.job_id, status: 'queued', error: null } });
      watchJob(job.job_id);
    } catch (error) {
      update(setToast(state, describe(error)));
    }
  }

  function stopPolling(): void {
    if (pollTimer !== null) {
      clearInterval(pollTimer);
      pollTimer = null;
    }
  }

  async function restore(): Promise<void> {
    const sessionId = storage.getItem(SESSION_KEY);
    if (!sessionId) return;
    try {
      const session = await client.getSession(sessionId);
      update(applySession(state, session));
      if (session.active_job) watchJob(session.active_job);
      const raw = storage.getItem(QUERY_KEY);
      if (raw) {
        const query = JSON.parse(raw) as { imageId: string; k: number };
        await search(query.imageId, query.k);
      }
    } catch {
      storage.removeItem(SESSION_KEY); // stale session: start fresh
      storage.removeItem(QUERY_KEY);
    }
  }

  container.addEventListener('click', (event) => {
    const target = event.target as HTMLElement;
    if (target.id === 'search-btn') {
      const imageId = (container.querySelector('#query-id') as HTMLInputElement).value.trim();
      const k = parseInt((container.querySelector('#query-k') as HTMLInputElement).value, 10);
      if (imageId && k >= 1) void search(imageId, k);
      return;
    }
    if (target.id === 'refine-btn') {
      void refine();
      return;
    }
    const action = target.dataset.action;
    const itemId = target.dataset.id;
    if ((action === 'approve' || action === 'decline') && itemId) {
      void feedback(itemId, action);
    }
  });

  container.addEventListener('change', (event) => {
    const target = event.target as HTMLInputElement;
    if (target.id === 'query-file' && target.files && target.files[0]) {
      const k = parseInt((container.querySelector('#query-k') as HTMLInputElement).value, 10);
      void searchUpload(target.files[0], k >= 1 ? k : 12);
    }
  });

  render(container, state, client);
  const ready = restore();

  return {
    search,
    destroy(): void {
      destroyed = true;
      stopPolling();
      searchController?.abort();
    },
    getState: () => state,
    ready,
  };
}

function describe(error: unknown): string {
  if (error instanceof ApiError) return error.message;
  if (error instanceof Error) return error.message;
  return String(error);
}

/** Browser entry point: mount on #app, API base from `?api=...` if given. */
export function bootstrap(): void {
  const app = document.getElementById('app');
  if (!app) return;
  const base = new URLSearchParams(window.location.search).get('api') ?? '';
  mountApp(app, new CelestialClient(base));
}

if (typeof document !== 'undefined' && document.getElementById('app')) {
  bootstrap();
}
