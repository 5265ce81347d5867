use std::collections::HashSet;
use std::io::Write;
use std::net::TcpListener;
use std::sync::Arc;

use dtask_core::protocol::{read_message, write_message, ProtocolError, ToServer, ToWorker};
use dtask_core::TaskId;

use super::{serve_peers, ServerLink, WorkerReport, ZERO_OBJECT};

/// Zero-mode loop: every message is answered inline on the connection
/// thread; replies are flushed whenever no further input is buffered, so a
/// burst of assignments is acknowledged with few system calls.
pub(super) fn run(link: ServerLink, listener: TcpListener) -> anyhow::Result<WorkerReport> {
    let mut peers = serve_peers(listener, Arc::new(|_| Some(ZERO_OBJECT.to_vec())))?;
    let ServerLink { worker_id, mut reader, mut writer } = link;
    let mut report = WorkerReport { worker_id, max_running: 0, ..Default::default() };
    let mut present: HashSet<TaskId> = HashSet::new();
    let result = loop {
        let msg = match read_message(&mut reader).and_then(ToWorker::from_message) {
            Ok(m) => m,
            Err(ProtocolError::ConnectionLost) => break Ok(()),
            Err(e) => break Err(e.into()),
        };
        let mut out = |m: ToServer| write_message(&mut writer, &m.into_message());
        let sent = match msg {
            ToWorker::AssignTask { task, inputs, .. } => {
                let mut r = Ok(());
                for input in inputs {
                    if r.is_ok() && present.insert(input.task) {
                        r = out(ToServer::DataPlaced { task: input.task });
                    }
                }
                report.completed += 1;
                present.insert(task);
                r.and_then(|_| out(ToServer::TaskFinished { task, size: ZERO_OBJECT.len() as u64 }))
            }
            ToWorker::StealRequest { task } => {
                report.steals_refused += 1;
                out(ToServer::StealResponse { task, success: false })
            }
            ToWorker::FetchData { task } => out(ToServer::DataReply { task, data: Some(ZERO_OBJECT.to_vec()) }),
            ToWorker::ReleaseData { tasks } => {
                for t in tasks {
                    present.remove(&t);
                }
                Ok(())
            }
            ToWorker::Registered { .. } => Ok(()),
            ToWorker::Shutdown => break Ok(()),
        };
        if let Err(e) = sent {
            break Err(e.into());
        }
        if reader.buffer().is_empty() {
            if let Err(e) = writer.flush() {
                break Err(e.into());
            }
        }
    };
    let _ = writer.flush();
    peers.stop();
    log::info!("zero worker {worker_id} stopping after {} tasks", report.completed);
    result.map(|_| report)
}
