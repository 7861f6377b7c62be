//! Parallel thought processes: the pid tree and the rules of the reserved
//! fork, spawn and kill tools. The environments themselves live in the
//! runtime.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::toolkit::{RequestId, ReservedTool};

pub type Pid = u64;

pub const ROOT_PID: Pid = 0;
pub const DEFAULT_MAX_DEPTH: usize = 3;
pub const DEFAULT_CHILD_SYSTEM_PROMPT: &str =
    "You are a helper process. Complete the task you are given and report the result in chat.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessStatus {
    Running,
    Finished,
    Killed,
}

impl ProcessStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ProcessStatus::Running => "running",
            ProcessStatus::Finished => "finished",
            ProcessStatus::Killed => "killed",
        }
    }
}

impl fmt::Display for ProcessStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a child came to be: the reserved tool and the parent's request id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub tool: ReservedTool,
    pub request_id: RequestId,
}

/// Snapshot record of one process, as exported to clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessInfo {
    pub pid: Pid,
    pub parent: Option<Pid>,
    pub status: ProcessStatus,
    pub origin_request: Option<RequestId>,
}

#[derive(Debug, Clone)]
struct Node {
    parent: Option<Pid>,
    depth: usize,
    status: ProcessStatus,
    origin: Option<Origin>,
    model_override: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProcessError {
    #[error("process {0} does not exist")]
    Unknown(Pid),
    #[error("process {0} is not running")]
    NotRunning(Pid),
    #[error("process {target} is not a descendant of process {caller}")]
    NotDescendant { caller: Pid, target: Pid },
    #[error("the root process cannot be killed")]
    Root,
    #[error("process depth limit {0} reached")]
    DepthLimit(usize),
}

/// The pid tree. Pid 0 is the root; children get increasing pids.
#[derive(Debug, Clone)]
pub struct ProcessTree {
    nodes: BTreeMap<Pid, Node>,
    next_pid: Pid,
    max_depth: usize,
}

impl ProcessTree {
    pub fn new(max_depth: usize) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(
            ROOT_PID,
            Node {
                parent: None,
                depth: 0,
                status: ProcessStatus::Running,
                origin: None,
                model_override: None,
            },
        );
        Self {
            nodes,
            next_pid: ROOT_PID + 1,
            max_depth,
        }
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn contains(&self, pid: Pid) -> bool {
        self.nodes.contains_key(&pid)
    }

    pub fn status(&self, pid: Pid) -> Option<ProcessStatus> {
        self.nodes.get(&pid).map(|n| n.status)
    }

    pub fn is_running(&self, pid: Pid) -> bool {
        self.status(pid) == Some(ProcessStatus::Running)
    }

    pub fn parent(&self, pid: Pid) -> Option<Pid> {
        self.nodes.get(&pid).and_then(|n| n.parent)
    }

    pub fn depth(&self, pid: Pid) -> Option<usize> {
        self.nodes.get(&pid).map(|n| n.depth)
    }

    pub fn origin(&self, pid: Pid) -> Option<&Origin> {
        self.nodes.get(&pid).and_then(|n| n.origin.as_ref())
    }

    pub fn model_override(&self, pid: Pid) -> Option<&str> {
        self.nodes.get(&pid).and_then(|n| n.model_override.as_deref())
    }

    pub fn pids(&self) -> impl Iterator<Item = Pid> + '_ {
        self.nodes.keys().copied()
    }

    /// Adds a running child of `parent`.
    pub fn create(
        &mut self,
        parent: Pid,
        origin: Origin,
        model_override: Option<String>,
    ) -> Result<Pid, ProcessError> {
        let node = self.nodes.get(&parent).ok_or(ProcessError::Unknown(parent))?;
        if node.status != ProcessStatus::Running {
            return Err(ProcessError::NotRunning(parent));
        }
        let depth = node.depth + 1;
        if depth > self.max_depth {
            return Err(ProcessError::DepthLimit(self.max_depth));
        }
        let pid = self.next_pid;
        self.next_pid += 1;
        self.nodes.insert(
            pid,
            Node {
                parent: Some(parent),
                depth,
                status: ProcessStatus::Running,
                origin: Some(origin),
                model_override,
            },
        );
        Ok(pid)
    }

    /// True if `ancestor` lies strictly above `pid`.
    pub fn is_ancestor(&self, ancestor: Pid, pid: Pid) -> bool {
        let mut cur = self.parent(pid);
        while let Some(p) = cur {
            if p == ancestor {
                return true;
            }
            cur = self.parent(p);
        }
        false
    }

    /// Running children of `pid`.
    pub fn running_children(&self, pid: Pid) -> Vec<Pid> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.parent == Some(pid) && n.status == ProcessStatus::Running)
            .map(|(&p, _)| p)
            .collect()
    }

    /// Marks a running process finished.
    pub fn finish(&mut self, pid: Pid) -> Result<(), ProcessError> {
        let node = self.nodes.get_mut(&pid).ok_or(ProcessError::Unknown(pid))?;
        if node.status != ProcessStatus::Running {
            return Err(ProcessError::NotRunning(pid));
        }
        node.status = ProcessStatus::Finished;
        Ok(())
    }

    /// Checks whether `caller` may kill `target`; `None` is the operator, who
    /// may kill any running non-root process.
    pub fn check_kill(&self, caller: Option<Pid>, target: Pid) -> Result<(), ProcessError> {
        if target == ROOT_PID {
            return Err(ProcessError::Root);
        }
        let node = self.nodes.get(&target).ok_or(ProcessError::Unknown(target))?;
        if node.status != ProcessStatus::Running {
            return Err(ProcessError::NotRunning(target));
        }
        if let Some(caller) = caller {
            if !self.is_ancestor(caller, target) {
                return Err(ProcessError::NotDescendant { caller, target });
            }
        }
        Ok(())
    }

    /// Kills `target` and its running descendants, returning the killed pids
    /// with `target` first.
    pub fn kill(&mut self, caller: Option<Pid>, target: Pid) -> Result<Vec<Pid>, ProcessError> {
        self.check_kill(caller, target)?;
        let mut killed = Vec::new();
        let mut stack = vec![target];
        while let Some(pid) = stack.pop() {
            if let Some(node) = self.nodes.get_mut(&pid) {
                if node.status == ProcessStatus::Running {
                    node.status = ProcessStatus::Killed;
                    killed.push(pid);
                }
            }
            let mut children = self.running_children(pid);
            children.reverse();
            stack.extend(children);
        }
        Ok(killed)
    }

    pub fn snapshot(&self) -> Vec<ProcessInfo> {
        self.nodes
            .iter()
            .map(|(&pid, n)| ProcessInfo {
                pid,
                parent: n.parent,
                status: n.status,
                origin_request: n.origin.as_ref().map(|o| o.request_id.clone()),
            })
            .collect()
    }
}

/// Arguments of a fork or spawn call.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildRequest {
    pub instructions: String,
    pub model: Option<String>,
}

impl ChildRequest {
    /// Reads an already schema-validated payload.
    pub fn from_payload(payload: &Map<String, Value>) -> Self {
        Self {
            instructions: payload
                .get("instructions")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            model: payload.get("model").and_then(Value::as_str).map(str::to_string),
        }
    }
}

pub fn kill_target(payload: &Map<String, Value>) -> Option<Pid> {
    payload.get("pid").and_then(Value::as_u64)
}

pub fn killed_text(pid: Pid) -> String {
    format!("Process {pid} killed.")
}

pub fn terminated_text(pid: Pid) -> String {
    format!("Process {pid} terminated before completion.")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin(n: u64) -> Origin {
        Origin {
            tool: ReservedTool::Fork,
            request_id: RequestId::from_bits(n),
        }
    }

    #[test]
    fn depth_limit() {
        let mut tree = ProcessTree::new(2);
        let a = tree.create(ROOT_PID, origin(1), None).unwrap();
        let b = tree.create(a, origin(2), None).unwrap();
        assert_eq!(tree.create(b, origin(3), None), Err(ProcessError::DepthLimit(2)));
        assert_eq!(tree.depth(b), Some(2));
    }

    #[test]
    fn kill_is_recursive() {
        let mut tree = ProcessTree::new(3);
        let a = tree.create(ROOT_PID, origin(1), None).unwrap();
        let b = tree.create(a, origin(2), None).unwrap();
        let c = tree.create(ROOT_PID, origin(3), None).unwrap();
        assert_eq!(tree.kill(Some(ROOT_PID), a).unwrap(), vec![a, b]);
        assert_eq!(tree.status(b), Some(ProcessStatus::Killed));
        assert!(tree.is_running(c));
        assert_eq!(tree.kill(Some(ROOT_PID), a), Err(ProcessError::NotRunning(a)));
    }

    #[test]
    fn kill_permissions() {
        let mut tree = ProcessTree::new(3);
        let a = tree.create(ROOT_PID, origin(1), None).unwrap();
        let b = tree.create(ROOT_PID, origin(2), None).unwrap();
        assert_eq!(
            tree.check_kill(Some(a), b),
            Err(ProcessError::NotDescendant { caller: a, target: b })
        );
        assert!(tree.check_kill(Some(a), a).is_err());
        assert_eq!(tree.check_kill(None, ROOT_PID), Err(ProcessError::Root));
        assert_eq!(tree.check_kill(None, 99), Err(ProcessError::Unknown(99)));
        tree.finish(b).unwrap();
        assert_eq!(tree.check_kill(None, b), Err(ProcessError::NotRunning(b)));
    }

    #[test]
    fn snapshot_records() {
        let mut tree = ProcessTree::new(3);
        let a = tree.create(ROOT_PID, origin(5), None).unwrap();
        let snap = tree.snapshot();
        assert_eq!(snap.len(), 2);
        assert_eq!(snap[1].parent, Some(ROOT_PID));
        assert_eq!(snap[1].pid, a);
        assert_eq!(snap[1].origin_request, Some(RequestId::from_bits(5)));
        assert_eq!(snap[0].origin_request, None);
    }

    #[test]
    fn notification_texts() {
        assert_eq!(killed_text(3), "Process 3 killed.");
        assert_eq!(terminated_text(3), "Process 3 terminated before completion.");
    }
}
