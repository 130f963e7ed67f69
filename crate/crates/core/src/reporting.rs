//! Intake history and the provider-facing adherence report.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::domain::{
    DayPattern, DoseForm, DoseState, Flag, IntakeClass, Medication, MedicationId, MedicationSource,
    PatientId, TimeOfDay, Timestamp,
};
use crate::scheduler::{local_date, DateRange};
use crate::world::World;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicationRow {
    pub medication_id: MedicationId,
    pub name: String,
    pub strength: String,
    pub on_time: u32,
    pub late: u32,
    pub missed: u32,
    pub pending: u32,
    pub total: u32,
}

impl MedicationRow {
    pub fn taken(&self) -> u32 {
        self.on_time + self.late
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoppedMedication {
    pub medication: Medication,
    pub stop_reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdherenceReport {
    pub patient_id: PatientId,
    pub range: DateRange,
    pub rows: Vec<MedicationRow>,
    pub stopped_medications: Vec<StoppedMedication>,
    pub flags: Vec<Flag>,
    /// Doses taken (on time or late).
    pub taken: u32,
    /// Doses that reached a verdict: taken plus missed.
    pub owed: u32,
    /// `taken / owed`, or 0 when nothing is owed yet.
    pub adherence_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReportError {
    #[error("unknown patient {0}")]
    UnknownPatient(PatientId),
}

/// Counts the patient's doses with a local date in `range`, per medication.
/// Cancelled doses of stopped medications do not count.
pub fn build_report(world: &World, patient_id: &PatientId, range: DateRange) -> Result<AdherenceReport, ReportError> {
    let engine = world.engine(patient_id).ok_or_else(|| ReportError::UnknownPatient(patient_id.clone()))?;
    let mut rows: Vec<MedicationRow> = world
        .medications_of(patient_id)
        .map(|m| MedicationRow {
            medication_id: m.medication_id.clone(),
            name: m.name.clone(),
            strength: m.strength.clone(),
            on_time: 0,
            late: 0,
            missed: 0,
            pending: 0,
            total: 0,
        })
        .collect();
    for view in engine.doses_in(range) {
        let Some(row) = rows.iter_mut().find(|r| r.medication_id == view.event.medication_id) else {
            continue;
        };
        row.total += 1;
        match (view.event.state, view.intake.map(|i| i.classification)) {
            (DoseState::Acknowledged, Some(IntakeClass::OnTime)) => row.on_time += 1,
            (DoseState::Acknowledged, _) => row.late += 1,
            (DoseState::Missed, _) => row.missed += 1,
            _ => row.pending += 1,
        }
    }
    let stopped_medications = world
        .medications_of(patient_id)
        .filter(|m| !m.is_active())
        .map(|m| StoppedMedication { medication: m.clone(), stop_reason: m.stop_reason.clone().unwrap_or_default() })
        .collect();
    let tz = engine.timezone();
    let flags = engine.flags().iter().filter(|f| range.contains(local_date(tz, f.raised_at))).cloned().collect();
    let taken: u32 = rows.iter().map(MedicationRow::taken).sum();
    let owed = taken + rows.iter().map(|r| r.missed).sum::<u32>();
    let adherence_rate = if owed == 0 { 0.0 } else { f64::from(taken) / f64::from(owed) };
    Ok(AdherenceReport {
        patient_id: patient_id.clone(),
        range,
        rows,
        stopped_medications,
        flags,
        taken,
        owed,
        adherence_rate,
    })
}

pub const EXPORT_FORMAT: &str = "mama-provider-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportPatient {
    pub patient_id: PatientId,
    pub display_name: String,
    pub timezone: String,
}

/// A medication with its dose and frequency, as the provider sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportMedication {
    pub medication_id: MedicationId,
    pub name: String,
    pub strength: String,
    pub form: DoseForm,
    pub source: MedicationSource,
    pub times_of_day: Vec<TimeOfDay>,
    pub days: DayPattern,
    pub start_date: NaiveDate,
    pub end_date: Option<NaiveDate>,
    pub on_time: u32,
    pub late: u32,
    pub missed: u32,
    pub pending: u32,
    pub total: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportStopped {
    pub medication_id: MedicationId,
    pub name: String,
    pub strength: String,
    pub stop_reason: String,
    pub stopped_at: Option<Timestamp>,
}

/// The portable provider document. Field order is fixed by declaration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderExport {
    pub format: String,
    pub patient: ExportPatient,
    pub range: DateRange,
    pub medications: Vec<ExportMedication>,
    pub stopped: Vec<ExportStopped>,
    pub flags: Vec<Flag>,
    pub taken: u32,
    pub owed: u32,
    pub adherence_rate: f64,
}

pub fn provider_export(world: &World, patient_id: &PatientId, range: DateRange) -> Result<ProviderExport, ReportError> {
    let report = build_report(world, patient_id, range)?;
    let record = world.patient(patient_id).ok_or_else(|| ReportError::UnknownPatient(patient_id.clone()))?;
    let medications = report
        .rows
        .iter()
        .map(|row| {
            let med = world.medication(&row.medication_id).expect("row from world");
            let schedule = world.schedules_of(&row.medication_id).next().expect("every medication has a schedule");
            ExportMedication {
                medication_id: row.medication_id.clone(),
                name: row.name.clone(),
                strength: row.strength.clone(),
                form: med.form,
                source: med.source,
                times_of_day: schedule.times_of_day.clone(),
                days: schedule.days.clone(),
                start_date: schedule.start_date,
                end_date: schedule.end_date,
                on_time: row.on_time,
                late: row.late,
                missed: row.missed,
                pending: row.pending,
                total: row.total,
            }
        })
        .collect();
    let stopped = report
        .stopped_medications
        .iter()
        .map(|s| ExportStopped {
            medication_id: s.medication.medication_id.clone(),
            name: s.medication.name.clone(),
            strength: s.medication.strength.clone(),
            stop_reason: s.stop_reason.clone(),
            stopped_at: s.medication.stopped_at,
        })
        .collect();
    Ok(ProviderExport {
        format: EXPORT_FORMAT.to_owned(),
        patient: ExportPatient {
            patient_id: patient_id.clone(),
            display_name: record.profile.display_name.clone(),
            timezone: record.profile.timezone.clone(),
        },
        range,
        medications,
        stopped,
        flags: report.flags,
        taken: report.taken,
        owed: report.owed,
        adherence_rate: report.adherence_rate,
    })
}

/// Serializes the provider document as pretty JSON. Same inputs give the
/// same bytes.
pub fn export_provider_report(world: &World, patient_id: &PatientId, range: DateRange) -> Result<String, ReportError> {
    let doc = provider_export(world, patient_id, range)?;
    Ok(serde_json::to_string_pretty(&doc).expect("export serializes"))
}
