//! Mapping of domain and storage failures to HTTP responses.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use mama_core::escalation::EngineError;
use mama_core::ingestion::IngestionError;
use mama_core::mama::OpError;
use mama_core::reporting::ReportError;
use mama_core::store::StoreError;
use mama_core::world::WorldError;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, error: &'static str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { error, message: message.into(), detail: None } }
    }

    fn with_detail(mut self, detail: impl Serialize) -> Self {
        self.body.detail = serde_json::to_value(detail).ok();
        self
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
    }

    pub fn forbidden() -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", "token does not grant access to this resource")
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<WorldError> for ApiError {
    fn from(e: WorldError) -> Self {
        use StatusCode as S;
        let message = e.to_string();
        match e {
            WorldError::Profile(v) => Self::new(S::UNPROCESSABLE_ENTITY, "invalid_profile", message).with_detail(v),
            WorldError::DuplicatePatient(_) => Self::new(S::CONFLICT, "duplicate_patient", message),
            WorldError::UnknownPatient(_) | WorldError::UnknownMedication(_) => Self::not_found(message),
            WorldError::AlreadyStopped(current) => Self::new(S::CONFLICT, "already_stopped", message).with_detail(current),
            WorldError::NonMonotone { .. } => Self::new(S::CONFLICT, "clock_moved_backwards", message),
            WorldError::Ingestion(e) => match e {
                IngestionError::Invalid(d) => Self::new(S::UNPROCESSABLE_ENTITY, "invalid_entries", message).with_detail(d),
                IngestionError::Empty | IngestionError::EmptyImage | IngestionError::PatientMismatch { .. } => {
                    Self::new(S::UNPROCESSABLE_ENTITY, "invalid_payload", message)
                }
                IngestionError::UnknownPatient(_) | IngestionError::UnknownSubmission(_) => Self::not_found(message),
                IngestionError::NotPending(..) => Self::new(S::CONFLICT, "scan_not_pending", message),
            },
            WorldError::Engine(e) => match e {
                EngineError::UnknownDose(_) => Self::not_found(message),
                EngineError::AlreadyMissed(_) => Self::new(S::CONFLICT, "dose_missed", message),
                EngineError::TooEarly(_) => Self::new(S::UNPROCESSABLE_ENTITY, "too_early", message),
                EngineError::AheadOfClock { .. } => Self::new(S::UNPROCESSABLE_ENTITY, "in_the_future", message),
                EngineError::NonMonotone { .. } => Self::new(S::CONFLICT, "clock_moved_backwards", message),
                EngineError::Profile(v) => Self::new(S::UNPROCESSABLE_ENTITY, "invalid_profile", message).with_detail(v),
                EngineError::ReviewTooEarly { .. } => Self::new(S::INTERNAL_SERVER_ERROR, "internal", message),
            },
        }
    }
}

impl From<OpError> for ApiError {
    fn from(e: OpError) -> Self {
        match e {
            OpError::World(w) | OpError::Store(StoreError::World(w)) => w.into(),
            OpError::Report(r) => r.into(),
            OpError::Store(StoreError::Poisoned) => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "store_poisoned", StoreError::Poisoned.to_string())
            }
            OpError::Store(s) => {
                tracing::error!(error = %s, "store failure");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "store", s.to_string())
            }
        }
    }
}

impl From<ReportError> for ApiError {
    fn from(e: ReportError) -> Self {
        Self::not_found(e.to_string())
    }
}
