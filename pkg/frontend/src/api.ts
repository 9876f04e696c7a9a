import type { DecisionBody, ReviewTask, Stats } from './types';

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = 'ApiError';
  }
}

async function errorMessage(response: Response): Promise<string> {
  try {
    const body = await response.json();
    if (body && typeof body.error === 'string') return body.error;
  } catch {
    // non-JSON error body
  }
  return `HTTP ${response.status}`;
}

/** Thin typed client over the review service endpoints. */
export class ReviewApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, '') + path;
  }

  /** Next pending task, or null when the queue is empty (204). */
  async nextTask(): Promise<ReviewTask | null> {
    const response = await this.fetchImpl(this.url('/tasks/next'));
    if (response.status === 204) return null;
    if (!response.ok) throw new ApiError(response.status, await errorMessage(response));
    return (await response.json()) as ReviewTask;
  }

  async getTask(taskId: string): Promise<ReviewTask> {
    const response = await this.fetchImpl(this.url(`/tasks/${taskId}`));
    if (!response.ok) throw new ApiError(response.status, await errorMessage(response));
    return (await response.json()) as ReviewTask;
  }

  async decide(taskId: string, body: DecisionBody): Promise<ReviewTask> {
    const response = await this.fetchImpl(this.url(`/tasks/${taskId}/decision`), {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(body),
    });
    if (!response.ok) throw new ApiError(response.status, await errorMessage(response));
    return (await response.json()) as ReviewTask;
  }

  async stats(): Promise<Stats> {
    const response = await this.fetchImpl(this.url('/stats'));
    if (!response.ok) throw new ApiError(response.status, await errorMessage(response));
    return (await response.json()) as Stats;
  }

  imageUrl(path: string): string {
    return this.url(path);
  }
}
