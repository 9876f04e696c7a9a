// JSON schemas of the review service (see ../INTERFACES.md). The UI consumes
// exactly these shapes and never invents or reorders fields.

export interface Candidate {
  rank: number;
  identity_id: string;
  distance: number;
  exemplar_image_ids: string[];
  exemplar_urls: string[];
}

export type TaskStatus = 'pending' | 'confirmed' | 'new_individual' | 'skipped';

export interface ReviewTask {
  task_id: string;
  query_image_id: string;
  query_image_url: string;
  status: TaskStatus;
  candidates: Candidate[];
  decided_identity: string | null;
  decided_at: string | null;
  decided_by: string | null;
}

export type DecisionAction = 'confirm' | 'new_individual' | 'skip';

export interface DecisionBody {
  action: DecisionAction;
  identity_id?: string;
  override?: boolean;
  decided_by?: string;
}

export interface Stats {
  pending: number;
  decided: number;
  confirmed: number;
  new_individual: number;
  skipped: number;
  top1_agreement: number | null;
  top5_agreement: number | null;
}
