use std::collections::HashMap;
use std::sync::Mutex;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Clips,
    Song,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub request: serde_json::Value,
    /// Clip or song ids produced by the job.
    pub result: Vec<String>,
    pub error: Option<String>,
}

/// In-memory job table. Status only moves queued -> running -> done|failed.
#[derive(Debug, Default)]
pub struct JobRegistry {
    inner: Mutex<Registry>,
}

#[derive(Debug, Default)]
struct Registry {
    next: u64,
    jobs: HashMap<String, Job>,
}

impl JobRegistry {
    pub fn create(&self, kind: JobKind, request: serde_json::Value) -> Job {
        let mut reg = self.inner.lock().unwrap();
        reg.next += 1;
        let job = Job {
            id: format!("job-{}", reg.next),
            kind,
            status: JobStatus::Queued,
            request,
            result: Vec::new(),
            error: None,
        };
        reg.jobs.insert(job.id.clone(), job.clone());
        job
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.inner.lock().unwrap().jobs.get(id).cloned()
    }

    fn transition(&self, id: &str, from: JobStatus, update: impl FnOnce(&mut Job)) -> bool {
        let mut reg = self.inner.lock().unwrap();
        match reg.jobs.get_mut(id) {
            Some(job) if job.status == from => {
                update(job);
                true
            }
            _ => false,
        }
    }

    pub fn start(&self, id: &str) -> bool {
        self.transition(id, JobStatus::Queued, |j| j.status = JobStatus::Running)
    }

    pub fn finish(&self, id: &str, result: Vec<String>) -> bool {
        self.transition(id, JobStatus::Running, |j| {
            j.status = JobStatus::Done;
            j.result = result;
        })
    }

    pub fn fail(&self, id: &str, error: String) -> bool {
        self.transition(id, JobStatus::Running, |j| {
            j.status = JobStatus::Failed;
            j.error = Some(error);
        })
    }
}
