use std::collections::HashMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::Semaphore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub message: String,
    /// Whether a model or embedding provider caused the failure.
    pub provider: bool,
    /// Whatever was computed before the failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: String,
    pub status: JobStatus,
    pub created: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<JobFailure>,
}

/// In-memory registry of background jobs.
pub struct Jobs {
    table: Arc<RwLock<HashMap<String, Job>>>,
    slots: Arc<Semaphore>,
}

impl Jobs {
    pub fn new(max_running: usize) -> Self {
        Self {
            table: Arc::new(RwLock::new(HashMap::new())),
            slots: Arc::new(Semaphore::new(max_running)),
        }
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.table.read().get(id).cloned()
    }

    /// Registers a job and runs `work` on the blocking pool once a slot is
    /// free. Must be called from within a tokio runtime.
    pub fn spawn<F>(&self, kind: &str, work: F) -> Job
    where
        F: FnOnce() -> Result<Value, JobFailure> + Send + 'static,
    {
        let job = Job {
            id: uuid::Uuid::new_v4().to_string(),
            kind: kind.to_string(),
            status: JobStatus::Pending,
            created: Utc::now(),
            finished: None,
            result: None,
            error: None,
        };
        self.table.write().insert(job.id.clone(), job.clone());
        let table = self.table.clone();
        let slots = self.slots.clone();
        let id = job.id.clone();
        tokio::spawn(async move {
            let _permit = slots.acquire_owned().await.expect("semaphore is never closed");
            if let Some(j) = table.write().get_mut(&id) {
                j.status = JobStatus::Running;
            }
            let outcome = tokio::task::spawn_blocking(work).await.unwrap_or_else(|e| {
                Err(JobFailure {
                    message: format!("job panicked: {e}"),
                    provider: false,
                    partial: None,
                })
            });
            if let Some(j) = table.write().get_mut(&id) {
                j.finished = Some(Utc::now());
                match outcome {
                    Ok(v) => {
                        j.status = JobStatus::Done;
                        j.result = Some(v);
                    }
                    Err(f) => {
                        log::warn!("job {id} ({}) failed: {}", j.kind, f.message);
                        j.status = JobStatus::Failed;
                        j.error = Some(f);
                    }
                }
            }
        });
        job
    }
}
