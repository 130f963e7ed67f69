// Patient-facing API of mama-service. Every screen (today, add, stop, scan,
// report, settings) is rebuilt from these calls alone; each mutation maps
// to exactly one endpoint.

export type Iso = string; // RFC 3339 instant, UTC
export type LocalDate = string; // YYYY-MM-DD
export type LocalTime = string; // HH:MM

export type DoseState = "SCHEDULED" | "NOTIFIED_PUSH" | "NOTIFIED_EMAIL" | "ACKNOWLEDGED" | "MISSED";
export type IntakeClass = "ON_TIME" | "LATE";
export type DoseForm = "TABLET" | "CAPSULE" | "LIQUID" | "OTHER";
export type Weekday = "Mon" | "Tue" | "Wed" | "Thu" | "Fri" | "Sat" | "Sun";
export type Channel = "PUSH" | "EMAIL" | "VOICE" | "CAREGIVER_SMS";

export interface PatientProfile {
  patient_id: string;
  display_name: string;
  timezone: string;
  phone?: string | null;
  email?: string | null;
  caregiver_phone?: string | null;
  daily_check_time: LocalTime;
  reminders_per_dose: number;
}

export interface SignUp {
  patient_id?: string;
  display_name: string;
  timezone: string;
  phone?: string;
  email?: string;
  caregiver_phone?: string;
  daily_check_time?: LocalTime;
  reminders_per_dose?: number;
}

export interface MedicationEntry {
  name: string;
  strength: string;
  form: DoseForm;
  times_of_day: LocalTime[];
  days?: "daily" | Weekday[];
  start_date: LocalDate;
  end_date?: LocalDate | null;
  prescriber?: string | null;
}

export interface Medication {
  medication_id: string;
  patient_id: string;
  name: string;
  strength: string;
  form: DoseForm;
  prescriber?: string | null;
  status: "ACTIVE" | "STOPPED";
  stop_reason?: string | null;
  stopped_at?: Iso | null;
  source: "AUTO" | "WEBFORM" | "MANUAL" | "SCAN";
}

export interface DoseSchedule {
  schedule_id: string;
  medication_id: string;
  times_of_day: LocalTime[];
  days: "daily" | Weekday[];
  start_date: LocalDate;
  end_date?: LocalDate | null;
}

export interface IntakeRecord {
  dose_event_id: string;
  acknowledged_at: Iso;
  classification: IntakeClass;
}

export interface Dose {
  dose_event_id: string;
  medication_id: string;
  medication_name: string;
  local_date: LocalDate;
  local_time: LocalTime;
  due_at: Iso;
  state: DoseState;
  intake: IntakeRecord | null;
}

export interface NotificationRecord {
  notification_id: string;
  patient_id: string;
  dose_event_id?: string | null;
  channel: Channel;
  sent_at: Iso;
  target: string;
  outcome: "DELIVERED" | "FAILED" | "SKIPPED_NO_TARGET";
}

export interface ScanSubmission {
  submission_id: string;
  patient_id: string;
  image_ref: string;
  submitted_at: Iso;
  status: "PENDING" | "TRANSCRIBED" | "REJECTED";
  resolved_payload?: { patient_id: string; entries: MedicationEntry[] } | null;
}

export interface MedicationRow {
  medication_id: string;
  name: string;
  strength: string;
  on_time: number;
  late: number;
  missed: number;
  pending: number;
  total: number;
}

export interface Flag {
  flag_id: string;
  patient_id: string;
  kind: "RED_FLAG" | "PROVIDER_FLAG";
  raised_at: Iso;
  context: string;
}

export interface AdherenceReport {
  patient_id: string;
  range: { start: LocalDate; end: LocalDate };
  rows: MedicationRow[];
  stopped_medications: { medication: Medication; stop_reason: string }[];
  flags: Flag[];
  taken: number;
  owed: number;
  adherence_rate: number;
}

/** Error body of every non-2xx response; `detail` carries per-entry diagnostics. */
export interface ApiErrorBody {
  error: string;
  message: string;
  detail?: { entry: number; problems: string[] }[] | unknown;
}

export class ApiError extends Error {
  constructor(readonly status: number, readonly body: ApiErrorBody) {
    super(body.message);
  }
}

export class MamaClient {
  constructor(private readonly base: string, private token?: string) {}

  private async call<T>(method: string, path: string, body?: unknown, raw?: Blob): Promise<T> {
    const headers: Record<string, string> = {};
    if (this.token) headers.authorization = `Bearer ${this.token}`;
    if (body !== undefined) headers["content-type"] = "application/json";
    const res = await fetch(this.base + path, {
      method,
      headers,
      body: raw ?? (body === undefined ? undefined : JSON.stringify(body)),
    });
    const text = await res.text();
    const json = text ? JSON.parse(text) : null;
    if (!res.ok) throw new ApiError(res.status, json as ApiErrorBody);
    return json as T;
  }

  async signUp(form: SignUp): Promise<PatientProfile> {
    const out = await this.call<{ patient: PatientProfile; token: string }>("POST", "/patients", form);
    this.token = out.token;
    return out.patient;
  }

  profile(id: string): Promise<PatientProfile> {
    return this.call("GET", `/patients/${id}`);
  }

  /** Settings screen: contacts and daily check time gate the channels. */
  updateSettings(profile: PatientProfile): Promise<PatientProfile> {
    return this.call("PUT", `/patients/${profile.patient_id}`, profile);
  }

  /** Today view; poll at least once a minute. */
  doses(id: string, date?: LocalDate): Promise<Dose[]> {
    return this.call("GET", `/patients/${id}/doses${date ? `?date=${date}` : ""}`);
  }

  acknowledge(doseId: string, at?: Iso): Promise<{ record: IntakeRecord; duplicate: boolean }> {
    return this.call("POST", `/doses/${doseId}/ack`, at ? { at } : {});
  }

  medications(id: string): Promise<(Medication & { schedules: DoseSchedule[] })[]> {
    return this.call("GET", `/patients/${id}/medications`);
  }

  addMedication(id: string, entry: MedicationEntry): Promise<{ medication: Medication; schedule: DoseSchedule }> {
    return this.call("POST", `/patients/${id}/medications`, entry);
  }

  stopMedication(medicationId: string, reason: string): Promise<Medication> {
    return this.call("POST", `/medications/${medicationId}/stop`, { reason });
  }

  submitScan(id: string, image: Blob): Promise<ScanSubmission> {
    return this.call("POST", `/patients/${id}/scans`, undefined, image);
  }

  notifications(id: string): Promise<NotificationRecord[]> {
    return this.call("GET", `/patients/${id}/notifications`);
  }

  report(id: string, from?: LocalDate, to?: LocalDate): Promise<AdherenceReport> {
    const q = new URLSearchParams();
    if (from) q.set("from", from);
    if (to) q.set("to", to);
    const qs = q.toString();
    return this.call("GET", `/patients/${id}/report${qs ? `?${qs}` : ""}`);
  }
}
