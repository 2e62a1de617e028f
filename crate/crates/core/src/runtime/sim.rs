//! Single-threaded, deterministic executor with a virtual clock.
//!
//! Ready tasks run in FIFO order. When none are ready the clock jumps to
//! the earliest pending timer; timers with equal deadlines fire in
//! registration order. Given the same spawned work, every run produces the
//! same interleaving.

use std::cell::{Cell, RefCell};
use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};
use std::time::Duration;

use super::Clock;

type LocalTask = Pin<Box<dyn Future<Output = ()>>>;

struct Timer {
    deadline: Duration,
    seq: u64,
    waker: Waker,
}

impl PartialEq for Timer {
    fn eq(&self, other: &Self) -> bool {
        self.deadline == other.deadline && self.seq == other.seq
    }
}

impl Eq for Timer {}

impl PartialOrd for Timer {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Timer {
    // min-heap on (deadline, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .deadline
            .cmp(&self.deadline)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct TaskWaker {
    id: usize,
    queued: AtomicBool,
    ready: Arc<Mutex<VecDeque<usize>>>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        if !self.queued.swap(true, AtomicOrdering::AcqRel) {
            self.ready.lock().expect("ready queue").push_back(self.id);
        }
    }
}

struct TaskSlot {
    task: LocalTask,
    handle: Arc<TaskWaker>,
    waker: Waker,
}

struct Inner {
    now: Cell<Duration>,
    seq: Cell<u64>,
    timers: RefCell<BinaryHeap<Timer>>,
    spawned: RefCell<Vec<LocalTask>>,
    tasks: RefCell<Vec<Option<TaskSlot>>>,
    ready: Arc<Mutex<VecDeque<usize>>>,
    polls: Cell<u64>,
}

/// Handle to a virtual-time executor. Cheap to clone.
#[derive(Clone)]
pub struct Sim {
    inner: Rc<Inner>,
}

impl Default for Sim {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Sim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sim").field("now", &self.inner.now.get()).finish()
    }
}

impl Sim {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(Inner {
                now: Cell::new(Duration::ZERO),
                seq: Cell::new(0),
                timers: RefCell::new(BinaryHeap::new()),
                spawned: RefCell::new(Vec::new()),
                tasks: RefCell::new(Vec::new()),
                ready: Arc::new(Mutex::new(VecDeque::new())),
                polls: Cell::new(0),
            }),
        }
    }

    pub fn spawn(&self, fut: impl Future<Output = ()> + 'static) {
        self.inner.spawned.borrow_mut().push(Box::pin(fut));
    }

    /// Wakes `waker` once virtual time reaches `deadline`.
    pub fn wake_at(&self, deadline: Duration, waker: Waker) {
        let seq = self.inner.seq.get();
        self.inner.seq.set(seq + 1);
        self.inner.timers.borrow_mut().push(Timer {
            deadline,
            seq,
            waker,
        });
    }

    /// Number of task polls performed so far.
    pub fn polls(&self) -> u64 {
        self.inner.polls.get()
    }

    /// Runs until no task is ready and no timer is pending.
    pub fn run(&self) {
        self.run_until(Duration::MAX);
    }

    /// Runs until quiescent or until the next timer lies beyond `limit`.
    pub fn run_until(&self, limit: Duration) {
        let ready = self.inner.ready.clone();
        loop {
            self.adopt_spawned();
            let next = ready.lock().expect("ready queue").pop_front();
            if let Some(id) = next {
                let Some(mut slot) = self.inner.tasks.borrow_mut()[id].take() else {
                    continue;
                };
                self.inner.polls.set(self.inner.polls.get() + 1);
                slot.handle.queued.store(false, AtomicOrdering::Release);
                let mut cx = Context::from_waker(&slot.waker);
                if slot.task.as_mut().poll(&mut cx).is_pending() {
                    self.inner.tasks.borrow_mut()[id] = Some(slot);
                }
                continue;
            }
            let mut timers = self.inner.timers.borrow_mut();
            let Some(top) = timers.peek() else { break };
            if top.deadline > limit {
                break;
            }
            let deadline = top.deadline.max(self.inner.now.get());
            self.inner.now.set(deadline);
            while timers.peek().is_some_and(|t| t.deadline <= deadline) {
                let t = timers.pop().expect("peeked");
                t.waker.wake();
            }
        }
    }

    fn adopt_spawned(&self) {
        let spawned: Vec<LocalTask> = std::mem::take(&mut *self.inner.spawned.borrow_mut());
        let mut tasks = self.inner.tasks.borrow_mut();
        for task in spawned {
            let id = tasks.len();
            let handle = Arc::new(TaskWaker {
                id,
                queued: AtomicBool::new(false),
                ready: self.inner.ready.clone(),
            });
            let waker = Waker::from(handle.clone());
            handle.wake_by_ref();
            tasks.push(Some(TaskSlot {
                task,
                handle,
                waker,
            }));
        }
    }

    /// Drops every task and timer. Tasks usually hold clones of the `Sim`,
    /// so this is what releases their resources.
    pub fn shutdown(&self) {
        let tasks = std::mem::take(&mut *self.inner.tasks.borrow_mut());
        let spawned = std::mem::take(&mut *self.inner.spawned.borrow_mut());
        let timers = std::mem::take(&mut *self.inner.timers.borrow_mut());
        self.inner.ready.lock().expect("ready queue").clear();
        drop((tasks, spawned, timers));
    }

    /// Spawns `fut`, runs the simulation until it completes, and returns its
    /// output. Panics if the simulation goes quiescent first.
    pub fn block_on<T: 'static>(&self, fut: impl Future<Output = T> + 'static) -> T {
        let slot: Rc<RefCell<Option<T>>> = Rc::new(RefCell::new(None));
        let out = slot.clone();
        self.spawn(async move {
            let v = fut.await;
            *out.borrow_mut() = Some(v);
        });
        self.run();
        let v = slot.borrow_mut().take();
        v.expect("simulation stalled before the future completed")
    }
}

impl Clock for Sim {
    fn now(&self) -> Duration {
        self.inner.now.get()
    }

    fn sleep(&self, d: Duration) -> impl Future<Output = ()> {
        let deadline = self.now() + d;
        Sleep {
            sim: self.clone(),
            deadline,
            registered: false,
        }
    }

    fn sleep_until(&self, t: Duration) -> impl Future<Output = ()> {
        Sleep {
            sim: self.clone(),
            deadline: t,
            registered: false,
        }
    }
}

struct Sleep {
    sim: Sim,
    deadline: Duration,
    registered: bool,
}

impl Future for Sleep {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.sim.now() >= self.deadline {
            return Poll::Ready(());
        }
        if !self.registered {
            self.registered = true;
            let deadline = self.deadline;
            self.sim.wake_at(deadline, cx.waker().clone());
        }
        Poll::Pending
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sleeps_advance_virtual_time() {
        let sim = Sim::new();
        let s = sim.clone();
        let t = sim.block_on(async move {
            s.sleep(Duration::from_millis(12)).await;
            s.sleep(Duration::from_millis(3)).await;
            s.now()
        });
        assert_eq!(t, Duration::from_millis(15));
    }

    #[test]
    fn concurrent_tasks_interleave_deterministically() {
        let run = || {
            let sim = Sim::new();
            let log = Rc::new(RefCell::new(Vec::new()));
            for i in 0..4u64 {
                let s = sim.clone();
                let log = log.clone();
                sim.spawn(async move {
                    for step in 0..3u64 {
                        s.sleep(Duration::from_millis(10 - i)).await;
                        log.borrow_mut().push((s.now(), i, step));
                    }
                });
            }
            sim.run();
            let v = log.borrow().clone();
            v
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.len(), 12);
        assert!(a.windows(2).all(|w| w[0].0 <= w[1].0));
    }

    #[test]
    fn equal_deadlines_fire_in_registration_order() {
        let sim = Sim::new();
        let log = Rc::new(RefCell::new(Vec::new()));
        for i in 0..5 {
            let s = sim.clone();
            let log = log.clone();
            sim.spawn(async move {
                s.sleep(Duration::from_millis(5)).await;
                log.borrow_mut().push(i);
            });
        }
        sim.run();
        assert_eq!(*log.borrow(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    #[should_panic(expected = "stalled")]
    fn stalled_future_panics() {
        let sim = Sim::new();
        sim.block_on(std::future::pending::<()>());
    }
}
