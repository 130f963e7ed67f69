//! HTTP routes. Handlers only translate between JSON and the operations of
//! [`Mama`](mama_core::mama::Mama); no reminder logic lives here.

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{Days, NaiveDate};
use mama_core::domain::{
    DoseEventId, DoseState, IntakeRecord, MedicationId, NotificationRecord, PatientId, PatientProfile,
    SubmissionId, TimeOfDay, Timestamp,
};
use mama_core::ingestion::{MedicationEntry, ScanStatus, ScanSubmission, WebformPayload};
use mama_core::reporting::{build_report, provider_export, AdherenceReport, ProviderExport};
use mama_core::scheduler::{local_date, DateRange};
use mama_core::world::{LoadedMedication, World};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ApiError;
use crate::state::{fresh_token, token_digest, AppState, Caller};

type ApiResult<T> = Result<T, ApiError>;

/// Largest accepted prescription image.
pub const MAX_IMAGE_BYTES: usize = 10 * 1024 * 1024;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/patients", post(sign_up))
        .route("/patients/{id}", get(get_patient).put(put_patient))
        .route("/patients/{id}/medications", post(add_medication).get(list_medications))
        .route("/patients/{id}/scans", post(submit_scan).layer(axum::extract::DefaultBodyLimit::max(MAX_IMAGE_BYTES)))
        .route("/patients/{id}/doses", get(list_doses))
        .route("/patients/{id}/notifications", get(list_notifications))
        .route("/patients/{id}/report", get(patient_report))
        .route("/webform", post(webform))
        .route("/scans", get(list_scans))
        .route("/scans/{id}/transcribe", post(transcribe))
        .route("/scans/{id}/reject", post(reject_scan))
        .route("/doses/{id}/ack", post(acknowledge))
        .route("/medications/{id}/stop", post(stop_medication))
        .route("/provider/patients/{id}/report", get(provider_report))
        .route("/admin/clock", post(set_clock))
        .with_state(state)
}

fn caller(state: &AppState, headers: &HeaderMap) -> ApiResult<Caller> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
        .ok_or_else(ApiError::unauthorized)?;
    if token == state.config().provider_token {
        return Ok(Caller::Provider);
    }
    let snapshot = state.read();
    snapshot.world.find_token(&token_digest(token)).cloned().map(Caller::Patient).ok_or_else(ApiError::unauthorized)
}

fn require(state: &AppState, headers: &HeaderMap, patient: &PatientId) -> ApiResult<Caller> {
    let who = caller(state, headers)?;
    if who.may_access(patient) {
        Ok(who)
    } else {
        Err(ApiError::forbidden())
    }
}

fn require_provider(state: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    match caller(state, headers)? {
        Caller::Provider => Ok(()),
        Caller::Patient(_) => Err(ApiError::forbidden()),
    }
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    seq: u64,
    clock: Option<Timestamp>,
    next_wakeup: Option<Timestamp>,
}

async fn healthz(State(state): State<AppState>) -> Json<Health> {
    let snap = state.read();
    Json(Health { status: "ok", seq: snap.seq, clock: snap.world.clock(), next_wakeup: snap.world.next_wakeup() })
}

/// Sign-up form. Omitted fields take the service defaults.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignUp {
    #[serde(default)]
    pub patient_id: Option<String>,
    pub display_name: String,
    pub timezone: String,
    #[serde(default)]
    pub phone: Option<String>,
    #[serde(default)]
    pub email: Option<String>,
    #[serde(default)]
    pub caregiver_phone: Option<String>,
    #[serde(default)]
    pub daily_check_time: Option<TimeOfDay>,
    #[serde(default)]
    pub reminders_per_dose: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SignedUp {
    pub patient: PatientProfile,
    /// Shown once; only its digest is stored.
    pub token: String,
}

async fn sign_up(State(state): State<AppState>, Json(form): Json<SignUp>) -> ApiResult<(StatusCode, Json<SignedUp>)> {
    let profile = PatientProfile {
        patient_id: PatientId::new(form.patient_id.unwrap_or_default()),
        display_name: form.display_name,
        timezone: form.timezone,
        phone: form.phone,
        email: form.email,
        caregiver_phone: form.caregiver_phone,
        daily_check_time: form.daily_check_time.unwrap_or(state.config().default_daily_check_time),
        reminders_per_dose: form.reminders_per_dose.unwrap_or(1),
    };
    let token = fresh_token();
    let digest = token_digest(&token);
    let patient = state.write(|m, now| m.register(profile, now, Some(digest)))?;
    tracing::info!(patient = %patient.patient_id, "patient signed up");
    Ok((StatusCode::CREATED, Json(SignedUp { patient, token })))
}

async fn get_patient(State(state): State<AppState>, headers: HeaderMap, Path(id): Path<PatientId>) -> ApiResult<Json<PatientProfile>> {
    require(&state, &headers, &id)?;
    let snap = state.read();
    let record = snap.world.patient(&id).ok_or_else(|| ApiError::not_found(format!("unknown patient {id}")))?;
    Ok(Json(record.profile.clone()))
}

async fn put_patient(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<PatientId>,
    Json(mut profile): Json<PatientProfile>,
) -> ApiResult<Json<PatientProfile>> {
    require(&state, &headers, &id)?;
    if !profile.patient_id.as_str().is_empty() && profile.patient_id != id {
        return Err(ApiError::bad_request("patient_id in body does not match the path"));
    }
    profile.patient_id = id;
    Ok(Json(state.write(|m, now| m.update_profile(profile, now))?))
}

async fn add_medication(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<PatientId>,
    Json(entry): Json<MedicationEntry>,
) -> ApiResult<(StatusCode, Json<LoadedMedication>)> {
    require(&state, &headers, &id)?;
    Ok((StatusCode::CREATED, Json(state.write(|m, now| m.add_manual(&id, &entry, now))?)))
}

#[derive(Serialize)]
struct MedicationOut {
    #[serde(flatten)]
    medication: mama_core::domain::Medication,
    schedules: Vec<mama_core::domain::DoseSchedule>,
}

async fn list_medications(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<PatientId>,
) -> ApiResult<Json<Vec<MedicationOut>>> {
    require(&state, &headers, &id)?;
    let snap = state.read();
    patient_exists(&snap.world, &id)?;
    Ok(Json(
        snap.world
            .medications_of(&id)
            .map(|m| MedicationOut {
                medication: m.clone(),
                schedules: snap.world.schedules_of(&m.medication_id).cloned().collect(),
            })
            .collect(),
    ))
}

async fn webform(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(payload): Json<WebformPayload>,
) -> ApiResult<(StatusCode, Json<Vec<LoadedMedication>>)> {
    require(&state, &headers, &payload.patient_id)?;
    Ok((StatusCode::CREATED, Json(state.write(|m, now| m.load_webform(&payload, now))?)))
}

async fn submit_scan(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<PatientId>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<ScanSubmission>)> {
    require(&state, &headers, &id)?;
    if body.is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_payload", "scan image is empty"));
    }
    patient_exists(&state.read().world, &id)?;
    let digest: String = Sha256::digest(&body).iter().map(|b| format!("{b:02x}")).collect();
    let dir = &state.config().blob_dir;
    let path = dir.join(&digest);
    let stored = async {
        tokio::fs::create_dir_all(dir).await?;
        tokio::fs::write(&path, &body).await
    };
    stored.await.map_err(|e| {
        tracing::error!(error = %e, path = %path.display(), "storing scan image failed");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "blob_store", e.to_string())
    })?;
    let image_ref = format!("sha256:{digest}");
    Ok((StatusCode::CREATED, Json(state.write(|m, now| m.submit_scan(&id, &image_ref, now))?)))
}

#[derive(Deserialize)]
struct ScanFilter {
    status: Option<ScanStatus>,
}

async fn list_scans(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(filter): Query<ScanFilter>,
) -> ApiResult<Json<Vec<ScanSubmission>>> {
    require_provider(&state, &headers)?;
    let snap = state.read();
    Ok(Json(snap.world.scans().filter(|s| filter.status.is_none_or(|st| s.status == st)).cloned().collect()))
}

async fn transcribe(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<SubmissionId>,
    Json(payload): Json<WebformPayload>,
) -> ApiResult<(StatusCode, Json<Vec<LoadedMedication>>)> {
    require_provider(&state, &headers)?;
    Ok((StatusCode::CREATED, Json(state.write(|m, now| m.transcribe(&id, &payload, now))?)))
}

async fn reject_scan(State(state): State<AppState>, headers: HeaderMap, Path(id): Path<SubmissionId>) -> ApiResult<Json<ScanSubmission>> {
    require_provider(&state, &headers)?;
    Ok(Json(state.write(|m, now| m.reject_scan(&id, now))?))
}

#[derive(Deserialize)]
struct DoseQuery {
    date: Option<NaiveDate>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DoseOut {
    pub dose_event_id: DoseEventId,
    pub medication_id: MedicationId,
    pub medication_name: String,
    pub local_date: NaiveDate,
    pub local_time: TimeOfDay,
    pub due_at: Timestamp,
    pub state: DoseState,
    pub intake: Option<IntakeRecord>,
}

fn patient_exists(world: &World, id: &PatientId) -> ApiResult<()> {
    world.patient(id).map(|_| ()).ok_or_else(|| ApiError::not_found(format!("unknown patient {id}")))
}

/// The patient's local date at the current instant.
fn today(state: &AppState, world: &World, id: &PatientId) -> ApiResult<NaiveDate> {
    let engine = world.engine(id).ok_or_else(|| ApiError::not_found(format!("unknown patient {id}")))?;
    let now = world.clock().map_or(state.clock().now(), |c| c.max(state.clock().now()));
    Ok(local_date(engine.timezone(), now))
}

async fn list_doses(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<PatientId>,
    Query(q): Query<DoseQuery>,
) -> ApiResult<Json<Vec<DoseOut>>> {
    require(&state, &headers, &id)?;
    let snap = state.read();
    let world = &snap.world;
    let date = match q.date {
        Some(d) => d,
        None => today(&state, world, &id)?,
    };
    let engine = world.engine(&id).ok_or_else(|| ApiError::not_found(format!("unknown patient {id}")))?;
    let out = engine
        .doses_in(DateRange::single(date))
        .into_iter()
        .map(|v| DoseOut {
            medication_name: world.medication(&v.event.medication_id).map(|m| m.name.clone()).unwrap_or_default(),
            dose_event_id: v.event.dose_event_id,
            medication_id: v.event.medication_id,
            local_date: v.event.local_date,
            local_time: v.event.local_time,
            due_at: v.event.due_at,
            state: v.event.state,
            intake: v.intake,
        })
        .collect();
    Ok(Json(out))
}

async fn list_notifications(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<PatientId>,
) -> ApiResult<Json<Vec<NotificationRecord>>> {
    require(&state, &headers, &id)?;
    let snap = state.read();
    patient_exists(&snap.world, &id)?;
    Ok(Json(snap.world.notifications().iter().filter(|n| n.patient_id == id).cloned().collect()))
}

#[derive(Debug, Default, Deserialize)]
pub struct AckRequest {
    /// When the dose was taken; the request instant when absent.
    #[serde(default)]
    pub at: Option<Timestamp>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AckResponse {
    pub record: IntakeRecord,
    pub duplicate: bool,
}

async fn acknowledge(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<DoseEventId>,
    body: Option<Json<AckRequest>>,
) -> ApiResult<Json<AckResponse>> {
    let patient = state.read().world.patient_of_dose(&id).cloned().ok_or_else(|| ApiError::not_found(format!("unknown dose event {id}")))?;
    require(&state, &headers, &patient)?;
    let at = body.and_then(|Json(b)| b.at);
    let outcome = state.write(|m, now| m.acknowledge(&id, at.unwrap_or(now), now))?;
    Ok(Json(AckResponse { record: outcome.record, duplicate: outcome.duplicate }))
}

#[derive(Debug, Default, Deserialize)]
pub struct StopRequest {
    #[serde(default)]
    pub reason: String,
}

async fn stop_medication(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<MedicationId>,
    Json(body): Json<StopRequest>,
) -> ApiResult<Json<mama_core::domain::Medication>> {
    let patient = state
        .read()
        .world
        .medication(&id)
        .map(|m| m.patient_id.clone())
        .ok_or_else(|| ApiError::not_found(format!("unknown medication {id}")))?;
    require(&state, &headers, &patient)?;
    Ok(Json(state.write(|m, now| m.flag_stopped(&id, &body.reason, now))?))
}

#[derive(Deserialize)]
struct RangeQuery {
    from: Option<NaiveDate>,
    to: Option<NaiveDate>,
}

/// Defaults to the seven local days ending today.
fn range(state: &AppState, world: &World, id: &PatientId, q: &RangeQuery) -> ApiResult<DateRange> {
    let to = match q.to {
        Some(d) => d,
        None => today(state, world, id)?,
    };
    let from = q.from.unwrap_or(to - Days::new(6));
    DateRange::new(from, to).map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn patient_report(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<PatientId>,
    Query(q): Query<RangeQuery>,
) -> ApiResult<Json<AdherenceReport>> {
    require(&state, &headers, &id)?;
    let snap = state.read();
    let range = range(&state, &snap.world, &id, &q)?;
    Ok(Json(build_report(&snap.world, &id, range)?))
}

async fn provider_report(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<PatientId>,
    Query(q): Query<RangeQuery>,
) -> ApiResult<Json<ProviderExport>> {
    require_provider(&state, &headers)?;
    let snap = state.read();
    let range = range(&state, &snap.world, &id, &q)?;
    Ok(Json(provider_export(&snap.world, &id, range)?))
}

#[derive(Debug, Deserialize)]
pub struct ClockRequest {
    pub to: Timestamp,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClockResponse {
    pub clock: Timestamp,
    pub actions: usize,
}

async fn set_clock(State(state): State<AppState>, headers: HeaderMap, Json(req): Json<ClockRequest>) -> ApiResult<Json<ClockResponse>> {
    require_provider(&state, &headers)?;
    let Some(manual) = state.manual_clock() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "clock_not_manual", "the service runs on the system clock"));
    };
    manual.set(req.to);
    let (clock, actions) = state.write(|m, now| Ok((now, m.advance(now)?.len())))?;
    Ok(Json(ClockResponse { clock, actions }))
}
