/** Typed client for the celestial HTTP API. */

export type Verdict = 'approve' | 'decline';

export interface SearchResult {
  id: string;
  similarity: number;
  score: number;
  relevance: number | null;
  thumbnail: string;
}

export interface SearchResponse {
  session_id: string;
  generation: number;
  k: number;
  results: SearchResult[];
}

export interface SessionState {
  id: string;
  queries: string[];
  feedback: Record<string, Verdict>;
  generation: number;
  snapshot_id: string | null;
  active_job: string | null;
}

export interface JobState {
  id: string;
  session_id: string;
  status: 'queued' | 'running' | 'done' | 'failed';
  snapshot_id: string | null;
  error: string | null;
  transitions: [string, number][];
}

export interface ServerStatus {
  checkpoint_digest: string;
  index_size: number;
  embedding_dim: number;
  num_classes: number;
  image_size: [number, number];
  alpha: number;
  sessions: number;
  uptime_seconds: number;
}

/** Error carrying the HTTP status and the server's `detail` message. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(detail);
    this.name = 'ApiError';
  }
}

async function parseJson(response: Response): Promise<unknown> {
  const text = await response.text();
  try {
    return text ? JSON.parse(text) : null;
  } catch {
    return null;
  }
}

export class CelestialClient {
  constructor(readonly baseUrl: string = '') {}

  private async request(path: string, init?: RequestInit): Promise<unknown> {
    const response = await fetch(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      const body = (await parseJson(response)) as { detail?: string } | null;
      throw new ApiError(response.status, body?.detail ?? `HTTP ${response.status}`);
    }
    if (response.status === 204) return null;
    return parseJson(response);
  }

  searchById(
    imageId: string,
    k: number,
    sessionId?: string | null,
    options: { excludeSelf?: boolean; signal?: AbortSignal } = {},
  ): Promise<SearchResponse> {
    return this.request('/api/search', {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({
        image_id: imageId,
        k,
        session_id: sessionId ?? undefined,
        exclude_self: options.excludeSelf ?? false,
      }),
      signal: options.signal,
    }) as Promise<SearchResponse>;
  }

  searchUpload(
    file: Blob,
    k: number,
    sessionId?: string | null,
    signal?: AbortSignal,
  ): Promise<SearchResponse> {
    const form = new FormData();
    // a File carries its own name; only raw Blobs need an explicit filename
    if (file instanceof File) form.append('file', file);
    else form.append('file', file, 'query.png');
    form.append('k', String(k));
    if (sessionId) form.append('session_id', sessionId);
    return this.request('/api/search', {
      method: 'POST',
      body: form,
      signal,
    }) as Promise<SearchResponse>;
  }

  async sendFeedback(sessionId: string, itemId: string, verdict: Verdict): Promise<void> {
    await this.request('/api/feedback', {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ session_id: sessionId, item_id: itemId, verdict }),
    });
  }

  startRefinement(sessionId: string): Promise<{ job_id: string; status: string }> {
    return this.request('/api/refine', {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ session_id: sessionId }),
    }) as Promise<{ job_id: string; status: string }>;
  }

  getJob(jobId: string): Promise<JobState> {
    return this.request(`/api/jobs/${jobId}`) as Promise<JobState>;
  }

  getSession(sessionId: string): Promise<SessionState> {
    return this.request(`/api/sessions/${sessionId}`) as Promise<SessionState>;
  }

  getStatus(): Promise<ServerStatus> {
    return this.request('/api/status') as Promise<ServerStatus>;
  }

  imageUrl(idOrThumbnail: string, size?: number): string {
    if (idOrThumbnail.startsWith('/')) return `${this.baseUrl}${idOrThumbnail}`;
    const suffix = size ? `?size=${size}` : '';
    return `${this.baseUrl}/api/images/${idOrThumbnail}${suffix}`;
  }
}
