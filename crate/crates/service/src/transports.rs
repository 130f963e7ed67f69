//! Transports the service can be configured with.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use mama_core::channels::{OutboundMessage, SendResult, Transport, Transports};
use mama_core::domain::Timestamp;
use serde::Serialize;

use crate::config::TransportConfig;

/// Writes each message to the service log.
#[derive(Debug, Default)]
pub struct LogTransport;

impl Transport for LogTransport {
    fn send(&mut self, msg: &OutboundMessage, at: Timestamp) -> SendResult {
        tracing::info!(
            notification = %msg.notification_id,
            channel = msg.channel.as_str(),
            target = %msg.target,
            %at,
            body = %msg.body,
            "outbound message"
        );
        SendResult::Delivered
    }
}

#[derive(Serialize)]
struct OutboxLine<'a> {
    at: Timestamp,
    #[serde(flatten)]
    message: &'a OutboundMessage,
}

/// Appends each message as a JSON line to a shared file.
#[derive(Debug, Clone)]
pub struct OutboxTransport(Arc<Mutex<File>>);

impl OutboxTransport {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self(Arc::new(Mutex::new(file))))
    }
}

impl Transport for OutboxTransport {
    fn send(&mut self, msg: &OutboundMessage, at: Timestamp) -> SendResult {
        let mut line = serde_json::to_vec(&OutboxLine { at, message: msg }).expect("messages serialize");
        line.push(b'\n');
        let mut file = self.0.lock().expect("outbox poisoned");
        match file.write_all(&line) {
            Ok(()) => SendResult::Delivered,
            Err(e) => {
                tracing::error!(error = %e, "outbox write failed");
                SendResult::Failed
            }
        }
    }
}

pub fn build(config: &TransportConfig) -> std::io::Result<Transports> {
    Ok(match config {
        TransportConfig::Log => Transports {
            push: Box::new(LogTransport),
            email: Box::new(LogTransport),
            voice: Box::new(LogTransport),
            sms: Box::new(LogTransport),
        },
        TransportConfig::Outbox { path } => {
            let outbox = OutboxTransport::open(path)?;
            Transports {
                push: Box::new(outbox.clone()),
                email: Box::new(outbox.clone()),
                voice: Box::new(outbox.clone()),
                sms: Box::new(outbox),
            }
        }
    })
}
