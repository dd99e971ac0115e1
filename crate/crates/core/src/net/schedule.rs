use std::sync::{Condvar, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Envelope, MessageKind, Network};

/// Messages a process wants sent, as (receiver, envelope).
pub type Outbox = Vec<(usize, Envelope)>;

/// A node driven by a scheduler. Processes never touch the network
/// directly; they return what to send.
pub trait Process {
    /// Whether the process can take a compute step now.
    fn ready(&self) -> bool;
    /// Whether the process has no more compute steps to take.
    fn done(&self) -> bool;
    fn step(&mut self) -> Result<Outbox>;
    fn deliver(&mut self, from: usize, envelope: Envelope) -> Result<Outbox>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// Lockstep rounds: every ready node steps, all pushes are applied, then
    /// pulls are served.
    Sync,
    /// Seeded random interleaving of steps and message deliveries.
    Async,
    /// One thread per node; not reproducible.
    Free,
}

impl std::str::FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(ScheduleMode::Sync),
            "async" => Ok(ScheduleMode::Async),
            "free" => Ok(ScheduleMode::Free),
            other => Err(Error::Config(format!("unknown schedule mode {other:?}"))),
        }
    }
}

/// What the scheduler just did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Step { node: usize },
    Deliver { from: usize, to: usize, kind: MessageKind },
}

fn post(net: &mut Network, from: usize, outbox: Outbox) -> Result<()> {
    for (to, envelope) in outbox {
        net.send(from, to, &envelope)?;
    }
    Ok(())
}

fn deliver_one<P: Process>(procs: &mut [P], net: &mut Network, from: usize, to: usize) -> Result<Event> {
    let envelope = net
        .recv(from, to)?
        .ok_or_else(|| Error::Scheduler(format!("no message on link {from} -> {to}")))?;
    let kind = envelope.kind;
    let outbox = procs[to].deliver(from, envelope)?;
    post(net, to, outbox)?;
    Ok(Event::Deliver { from, to, kind })
}

fn step_one<P: Process>(procs: &mut [P], net: &mut Network, node: usize) -> Result<Event> {
    let outbox = procs[node].step()?;
    post(net, node, outbox)?;
    Ok(Event::Step { node })
}

fn stalled<P: Process>(procs: &[P]) -> Result<()> {
    if procs.iter().all(Process::done) {
        Ok(())
    } else {
        let waiting: Vec<usize> = (0..procs.len()).filter(|&i| !procs[i].done()).collect();
        Err(Error::Scheduler(format!(
            "deadlock: no messages in flight and nodes {waiting:?} cannot step"
        )))
    }
}

/// Runs `procs` to completion over `net`. `observe` is called after every
/// event. Use [`run_free`] for the threaded mode.
pub fn run_schedule<P, F>(
    procs: &mut [P],
    net: &mut Network,
    mode: ScheduleMode,
    seed: u64,
    mut observe: F,
) -> Result<()>
where
    P: Process,
    F: FnMut(Event, &[P], &Network) -> Result<()>,
{
    if procs.len() != net.nodes() {
        return Err(Error::Config(format!(
            "{} processes on a network of {} nodes",
            procs.len(),
            net.nodes()
        )));
    }
    match mode {
        ScheduleMode::Sync => loop {
            let ready: Vec<usize> = (0..procs.len()).filter(|&i| procs[i].ready()).collect();
            if ready.is_empty() && net.is_idle() {
                return stalled(procs);
            }
            for node in ready {
                let event = step_one(procs, net, node)?;
                observe(event, procs, net)?;
            }
            loop {
                let heads: Vec<(usize, usize)> = net
                    .busy_links()
                    .into_iter()
                    .filter(|&(f, t)| net.peek_kind(f, t) == Some(MessageKind::Push))
                    .collect();
                if heads.is_empty() {
                    break;
                }
                for (from, to) in heads {
                    let event = deliver_one(procs, net, from, to)?;
                    observe(event, procs, net)?;
                }
            }
            while !net.is_idle() {
                for (from, to) in net.busy_links() {
                    let event = deliver_one(procs, net, from, to)?;
                    observe(event, procs, net)?;
                }
            }
        },
        ScheduleMode::Async => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            loop {
                let mut choices: Vec<Event> = (0..procs.len())
                    .filter(|&i| procs[i].ready())
                    .map(|node| Event::Step { node })
                    .collect();
                choices.extend(net.busy_links().into_iter().map(|(from, to)| Event::Deliver {
                    from,
                    to,
                    kind: MessageKind::Push,
                }));
                if choices.is_empty() {
                    return stalled(procs);
                }
                let event = match choices[rng.random_range(0..choices.len())] {
                    Event::Step { node } => step_one(procs, net, node)?,
                    Event::Deliver { from, to, .. } => deliver_one(procs, net, from, to)?,
                };
                observe(event, procs, net)?;
            }
        }
        ScheduleMode::Free => Err(Error::Config(
            "free-running mode needs thread-safe processes; use run_free".into(),
        )),
    }
}

/// Runs every process on its own thread until all are done and the network
/// has drained. Interleavings depend on the OS scheduler.
pub fn run_free<P: Process + Send>(procs: &mut [P], net: &mut Network) -> Result<()> {
    run_free_inner(procs, net)
}

struct Shared<'a> {
    net: &'a mut Network,
    done: Vec<bool>,
    ready: Vec<bool>,
    busy: usize,
    failed: Option<Error>,
}

fn run_free_inner<P: Process + Send>(procs: &mut [P], net: &mut Network) -> Result<()> {
    if procs.len() != net.nodes() {
        return Err(Error::Config(format!(
            "{} processes on a network of {} nodes",
            procs.len(),
            net.nodes()
        )));
    }
    let done = procs.iter().map(Process::done).collect();
    let ready = procs.iter().map(Process::ready).collect();
    let state = Mutex::new(Shared {
        net,
        done,
        ready,
        busy: 0,
        failed: None,
    });
    let wake = Condvar::new();
    std::thread::scope(|scope| {
        for (me, p) in procs.iter_mut().enumerate() {
            let (state, wake) = (&state, &wake);
            scope.spawn(move || loop {
                match next_action(state, wake, me, &*p) {
                    Ok(Some(action)) => {
                        let result = perform(p, action);
                        finish(state, wake, me, &*p, result);
                    }
                    Ok(None) => break,
                    Err(e) => {
                        state.lock().unwrap().failed.get_or_insert(e);
                        wake.notify_all();
                        break;
                    }
                }
            });
        }
    });
    match state.into_inner().unwrap().failed {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

enum Action {
    Step,
    Deliver(usize, Envelope),
}

fn next_action<P: Process>(state: &Mutex<Shared<'_>>, wake: &Condvar, me: usize, p: &P) -> Result<Option<Action>> {
    let mut s = state.lock().unwrap();
    loop {
        if s.failed.is_some() {
            return Ok(None);
        }
        let n = s.net.nodes();
        for from in 0..n {
            if let Some(env) = s.net.recv(from, me)? {
                s.busy += 1;
                return Ok(Some(Action::Deliver(from, env)));
            }
        }
        if p.ready() {
            s.busy += 1;
            return Ok(Some(Action::Step));
        }
        if s.busy == 0 && s.net.is_idle() && !s.ready.iter().any(|r| *r) {
            if !s.done.iter().all(|d| *d) {
                s.failed = Some(Error::Scheduler("deadlock in free-running mode".into()));
            }
            wake.notify_all();
            return Ok(None);
        }
        s = wake.wait(s).unwrap();
    }
}

fn perform<P: Process>(p: &mut P, action: Action) -> Result<Outbox> {
    match action {
        Action::Step => p.step(),
        Action::Deliver(from, env) => p.deliver(from, env),
    }
}

fn finish<P: Process>(state: &Mutex<Shared<'_>>, wake: &Condvar, me: usize, p: &P, result: Result<Outbox>) {
    let mut s = state.lock().unwrap();
    s.busy -= 1;
    s.done[me] = p.done();
    s.ready[me] = p.ready();
    match result {
        Ok(outbox) => {
            for (to, env) in outbox {
                if let Err(e) = s.net.send(me, to, &env) {
                    s.failed.get_or_insert(e);
                }
            }
        }
        Err(e) => {
            s.failed.get_or_insert(e);
        }
    }
    wake.notify_all();
}
