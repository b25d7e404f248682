/**
 * Application state and its (pure) transitions.
 *
 * The view is a function of this state alone, and the state itself is
 * derivable from server responses plus the not-yet-acknowledged optimistic
 * verdicts — so a full refresh (session fetch + re-search) reconstructs the
 * identical view.
 */

import type { JobState, SearchResult, SessionState, Verdict } from './api.js';

export interface JobBanner {
  id: string;
  status: 'queued' | 'running' | 'done' | 'failed';
  error: string | null;
}

export interface AppState {
  sessionId: string | null;
  generation: number;
  /** Last executed corpus-image query (uploads are not re-runnable). */
  lastQuery: { imageId: string; k: number } | null;
  queryLabel: string | null;
  results: SearchResult[];
  /** Server-acknowledged verdicts. */
  verdicts: Record<string, Verdict>;
  /** Optimistic verdicts awaiting the server ack; they win over `verdicts`. */
  pending: Record<string, Verdict>;
  job: JobBanner | null;
  toast: string | null;
  searching: boolean;
}

export function initialState(): AppState {
  return {
    sessionId: null,
    generation: 0,
    lastQuery: null,
    queryLabel: null,
    results: [],
    verdicts: {},
    pending: {},
    job: null,
    toast: null,
    searching: false,
  };
}

/** The verdict a card should display: optimistic first, then acknowledged. */
export function effectiveVerdict(state: AppState, itemId: string): Verdict | undefined {
  return state.pending[itemId] ?? state.verdicts[itemId];
}

function effectiveVerdicts(state: AppState): Verdict[] {
  return Object.keys({ ...state.verdicts, ...state.pending }).map(
    (id) => effectiveVerdict(state, id)!,
  );
}

/**
 * Refinement is offered exactly when the server would accept it: at least
 * one approve and one decline, and no job already in flight.
 */
export function canRefine(state: AppState): boolean {
  if (state.sessionId === null) return false;
  if (state.job !== null && (state.job.status === 'queued' || state.job.status === 'running')) {
    return false;
  }
  const verdicts = effectiveVerdicts(state);
  return verdicts.includes('approve') && verdicts.includes('decline');
}

export function applySearch(
  state: AppState,
  response: { session_id: string; generation: number; results: SearchResult[] },
  query: { imageId: string; k: number } | null,
  label: string,
): AppState {
  return {
    ...state,
    sessionId: response.session_id,
    generation: response.generation,
    results: response.results,
    lastQuery: query,
    queryLabel: label,
    searching: false,
    toast: null,
  };
}

export function applyOptimistic(state: AppState, itemId: string, verdict: Verdict): AppState {
  return { ...state, pending: { ...state.pending, [itemId]: verdict } };
}

export function confirmFeedback(state: AppState, itemId: string, verdict: Verdict): AppState {
  const pending = { ...state.pending };
  delete pending[itemId];
  return { ...state, pending, verdicts: { ...state.verdicts, [itemId]: verdict } };
}

export function rollbackFeedback(state: AppState, itemId: string, reason: string): AppState {
  const pending = { ...state.pending };
  delete pending[itemId];
  return { ...state, pending, toast: reason };
}

/** Rebuild verdicts/generation from the server's view of the session. */
export function applySession(state: AppState, session: SessionState): AppState {
  return {
    ...state,
    sessionId: session.id,
    generation: session.generation,
    verdicts: { ...session.feedback },
    job: session.active_job
      ? { id: session.active_job, status: 'running', error: null }
      : state.job,
  };
}

export function applyJob(state: AppState, job: JobState): AppState {
  return { ...state, job: { id: job.id, status: job.status, error: job.error } };
}

export function clearJob(state: AppState): AppState {
  return { ...state, job: null };
}

export function setSearching(state: AppState, searching: boolean): AppState {
  return { ...state, searching };
}

export function setToast(state: AppState, toast: string | null): AppState {
  return { ...state, toast };
}
