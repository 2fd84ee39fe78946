//! Controller-side data endpoint. Receives uplink flows, sends downlink
//! flows, answers echo requests, and streams closed windows for live views.

use tracing::debug;

use crate::control::{
    topic, Body, CollectorFlowReport, CollectorResults, CollectorWindow, Command, Dedupe, Envelope, MsgIds, PeerSpec,
};
use crate::dataplane::{Node, Peer};

#[derive(Debug)]
struct Active {
    run_id: String,
    step_index: usize,
    start_ns: u64,
    stop_ns: u64,
    window_ns: u64,
    next_window_ns: u64,
    node: Node,
}

#[derive(Debug)]
pub struct Collector {
    addr: String,
    active: Option<Active>,
    dedupe: Dedupe,
    ids: MsgIds,
}

impl Collector {
    pub fn new(addr: impl Into<String>) -> Self {
        Collector {
            addr: addr.into(),
            active: None,
            dedupe: Dedupe::default(),
            ids: MsgIds::new("collector"),
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn is_running(&self) -> bool {
        self.active.is_some()
    }

    pub fn data_plane_mut(&mut self) -> Option<&mut Node> {
        self.active.as_mut().map(|a| &mut a.node)
    }

    pub fn arm(&mut self, run_id: &str, step_index: usize, start_ns: u64, stop_ns: u64, window_ns: u64, peers: &[PeerSpec]) {
        let peers: Vec<Peer> = peers
            .iter()
            .map(|p| Peer {
                device_id: p.device_id.clone(),
                data_addr: p.data_addr.clone(),
                profile: p.profile.clone(),
            })
            .collect();
        self.active = Some(Active {
            run_id: run_id.to_string(),
            step_index,
            start_ns,
            stop_ns,
            window_ns,
            next_window_ns: start_ns.saturating_add(window_ns.max(1)),
            node: Node::for_collector(&self.addr, &peers, start_ns, stop_ns, window_ns),
        });
    }

    pub fn handle(&mut self, env: &Envelope, now_ns: u64) -> Vec<Envelope> {
        if !self.dedupe.first_time(&env.msg_id) {
            return Vec::new();
        }
        match &env.body {
            Body::Command(Command::ArmCollector {
                run_id,
                step_index,
                start_ns,
                stop_ns,
                window_ns,
                peers,
                clocks_synchronized,
            }) => {
                self.arm(run_id, *step_index, *start_ns, *stop_ns, *window_ns, peers);
                if let Some(a) = &mut self.active {
                    a.node.set_clocks_synchronized(*clocks_synchronized);
                }
                Vec::new()
            }
            Body::Command(Command::Abort { run_id }) if self.active.as_ref().is_some_and(|a| &a.run_id == run_id) => {
                self.finish(now_ns, true)
            }
            _ => Vec::new(),
        }
    }

    /// Next window boundary or the stop time, whichever comes first.
    pub fn next_wakeup_ns(&self) -> Option<u64> {
        self.active.as_ref().map(|a| a.next_window_ns.min(a.stop_ns))
    }

    fn envelope(&self, now_ns: u64, body: Body) -> Envelope {
        Envelope::new(topic::COLLECTOR_RESULTS, self.ids.next_id(), now_ns, body)
    }

    fn finish(&mut self, now_ns: u64, partial: bool) -> Vec<Envelope> {
        let mut out = self.windows(now_ns);
        let Some(a) = self.active.take() else { return out };
        let end = now_ns.clamp(a.start_ns, a.stop_ns.max(a.start_ns));
        let reports = a
            .node
            .finalize(end)
            .into_iter()
            .map(|(k, report)| CollectorFlowReport {
                device_id: k.device_id,
                flow_id: k.flow_id,
                report,
            })
            .collect();
        debug!(run_id = %a.run_id, step = a.step_index, "collector step finished");
        out.push(self.envelope(
            now_ns,
            Body::CollectorResults(CollectorResults {
                run_id: a.run_id,
                step_index: a.step_index,
                reports,
                partial,
            }),
        ));
        out
    }

    fn windows(&mut self, now_ns: u64) -> Vec<Envelope> {
        let Some(a) = self.active.as_mut() else { return Vec::new() };
        let (run_id, step_index) = (a.run_id.clone(), a.step_index);
        let w = a.window_ns.max(1);
        while a.next_window_ns <= now_ns {
            a.next_window_ns = a.next_window_ns.saturating_add(w);
        }
        let events = a.node.drain_closed_windows(now_ns);
        events
            .into_iter()
            .map(|window| {
                self.envelope(
                    now_ns,
                    Body::CollectorWindow(CollectorWindow {
                        run_id: run_id.clone(),
                        step_index,
                        window,
                    }),
                )
            })
            .collect()
    }

    pub fn tick(&mut self, now_ns: u64) -> Vec<Envelope> {
        match &self.active {
            Some(a) if now_ns >= a.stop_ns => self.finish(now_ns, false),
            Some(_) => self.windows(now_ns),
            None => Vec::new(),
        }
    }
}
