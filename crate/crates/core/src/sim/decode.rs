//! Decode worker state: continuous batching over KV slots.
//!
//! Memory is tracked in tokens of KV cache. Admission reserves one token of
//! growth for every slot, so a single step can never overflow.

use std::collections::VecDeque;

use crate::memory::{token_budget_for, Bytes, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeSlot {
    /// Trace index of the request.
    pub req: usize,
    /// Input plus tokens generated so far.
    pub ctx: u32,
    pub remaining: u32,
    pub admit_seq: u64,
    /// Admitted slots join at the next step boundary.
    pub active: bool,
}

/// A request whose KV cache is waiting for room on this worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Waiting {
    pub req: usize,
    pub ctx: u32,
    pub remaining: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Admitted,
    Deferred,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StepResult {
    /// Requests that emitted a token this step.
    pub emitted: Vec<usize>,
    /// Requests that emitted their last token.
    pub completed: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DecodeWorker {
    safe: Bytes,
    per_token: Bytes,
    budget: u64,
    slots: Vec<DecodeSlot>,
    wait: VecDeque<Waiting>,
    pub stepping: bool,
    next_seq: u64,
}

impl DecodeWorker {
    pub fn new(model: &ModelConfig, safe: Bytes) -> Self {
        DecodeWorker {
            safe,
            per_token: model.kv_bytes_per_token(),
            budget: token_budget_for(model, safe),
            slots: Vec::new(),
            wait: VecDeque::new(),
            stepping: false,
            next_seq: 0,
        }
    }

    pub fn safe_memory(&self) -> Bytes {
        self.safe
    }

    pub fn token_budget(&self) -> u64 {
        self.budget
    }

    pub fn slots(&self) -> &[DecodeSlot] {
        &self.slots
    }

    pub fn waiting(&self) -> &VecDeque<Waiting> {
        &self.wait
    }

    pub fn used_tokens(&self) -> u64 {
        self.slots.iter().map(|s| s.ctx as u64).sum()
    }

    /// Exact KV footprint of the resident slots.
    pub fn kv_bytes(&self) -> Bytes {
        self.used_tokens() * self.per_token
    }

    pub fn free_tokens(&self) -> u64 {
        self.budget.saturating_sub(self.used_tokens())
    }

    /// Tokens needed after every slot grows by one.
    pub fn projected_tokens(&self) -> u64 {
        self.slots.iter().map(|s| s.ctx as u64 + 1).sum()
    }

    fn fits(&self, ctx: u32) -> bool {
        self.projected_tokens() + (ctx as u64) < self.budget
    }

    /// Admit now if nobody is waiting and the lookahead fits; otherwise
    /// join the back of the wait queue.
    pub fn admit(&mut self, w: Waiting) -> Admission {
        if self.wait.is_empty() && self.fits(w.ctx) {
            self.push_slot(w);
            Admission::Admitted
        } else {
            self.wait.push_back(w);
            Admission::Deferred
        }
    }

    fn push_slot(&mut self, w: Waiting) {
        self.slots.push(DecodeSlot {
            req: w.req,
            ctx: w.ctx,
            remaining: w.remaining,
            admit_seq: self.next_seq,
            active: false,
        });
        self.next_seq += 1;
    }

    /// Admit from the head of the wait queue while it fits.
    pub fn admit_waiting(&mut self) -> Vec<usize> {
        let mut admitted = Vec::new();
        while let Some(&w) = self.wait.front() {
            if !self.fits(w.ctx) {
                break;
            }
            self.wait.pop_front();
            self.push_slot(w);
            admitted.push(w.req);
        }
        admitted
    }

    /// Mark every resident slot as part of the step about to start.
    pub fn activate_all(&mut self) {
        for s in &mut self.slots {
            s.active = true;
        }
    }

    /// Apply one finished step: every active slot emits a token; finished
    /// slots leave.
    pub fn finish_step(&mut self) -> StepResult {
        let mut res = StepResult::default();
        for s in self.slots.iter_mut().filter(|s| s.active) {
            s.ctx += 1;
            s.remaining -= 1;
            res.emitted.push(s.req);
            if s.remaining == 0 {
                res.completed.push(s.req);
            }
        }
        self.slots.retain(|s| s.remaining > 0);
        res
    }

    /// Evict the most recently admitted slots until the next step's growth
    /// fits. Returns them in eviction order.
    pub fn handle_growth_overflow(&mut self) -> Vec<DecodeSlot> {
        let mut evicted = Vec::new();
        while self.projected_tokens() > self.budget && !self.slots.is_empty() {
            let (pos, _) = self
                .slots
                .iter()
                .enumerate()
                .max_by_key(|(_, s)| s.admit_seq)
                .expect("non-empty");
            evicted.push(self.slots.remove(pos));
        }
        evicted
    }

    /// Put a suspended request back at the head of the wait queue.
    pub fn park_front(&mut self, w: Waiting) {
        self.wait.push_front(w);
    }
}

/// Worker with the most free KV tokens; ties go to the lower index.
pub fn choose_worker(workers: &[DecodeWorker]) -> usize {
    let mut best = 0;
    for (i, w) in workers.iter().enumerate().skip(1) {
        if w.free_tokens() > workers[best].free_tokens() {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 1,
            head_dim: 1,
            bytes_per_elem: 1,
            max_seq_len: 1000,
        }
    }

    fn w(req: usize, ctx: u32, remaining: u32) -> Waiting {
        Waiting { req, ctx, remaining }
    }

    #[test]
    fn empty_worker_admits() {
        let mut d = DecodeWorker::new(&tiny(), 2000);
        assert_eq!(d.token_budget(), 1000);
        assert_eq!(d.admit(w(0, 500, 3)), Admission::Admitted);
        assert_eq!(d.kv_bytes(), 1000);
    }

    #[test]
    fn full_worker_defers() {
        let mut d = DecodeWorker::new(&tiny(), 2000);
        assert_eq!(d.admit(w(0, 999, 1)), Admission::Admitted);
        // resident plus lookahead already equals the budget
        assert_eq!(d.projected_tokens(), 1000);
        assert_eq!(d.admit(w(1, 1, 1)), Admission::Deferred);
        assert_eq!(d.waiting().len(), 1);
        // FIFO: a later request that would fit still waits behind the head
        let mut d = DecodeWorker::new(&tiny(), 2000);
        d.admit(w(0, 900, 5));
        assert_eq!(d.admit(w(1, 200, 1)), Admission::Deferred);
        assert_eq!(d.admit(w(2, 1, 1)), Admission::Deferred);
    }

    #[test]
    fn choose_most_free_then_lowest_index() {
        let mut ws = vec![DecodeWorker::new(&tiny(), 2000), DecodeWorker::new(&tiny(), 2000)];
        assert_eq!(choose_worker(&ws), 0);
        ws[0].admit(w(0, 10, 1));
        assert_eq!(choose_worker(&ws), 1);
        ws[1].admit(w(1, 10, 1));
        assert_eq!(choose_worker(&ws), 0);
    }

    #[test]
    fn step_emits_and_completes() {
        let mut d = DecodeWorker::new(&tiny(), 2000);
        d.admit(w(0, 100, 1));
        d.admit(w(1, 100, 2));
        d.activate_all();
        d.admit(w(2, 5, 5));
        let r = d.finish_step();
        assert_eq!(r.emitted, vec![0, 1]);
        assert_eq!(r.completed, vec![0]);
        assert_eq!(d.slots().len(), 2);
        assert_eq!(d.slots()[0].ctx, 101);
        assert_eq!(d.slots()[1].ctx, 5, "inactive slot does not advance");
    }

    #[test]
    fn overflow_suspends_lifo_minimal() {
        let mut d = DecodeWorker::new(&tiny(), 2000);
        assert!(d.handle_growth_overflow().is_empty());
        d.admit(w(0, 400, 100));
        d.admit(w(1, 300, 100));
        d.admit(w(2, 200, 100));
        d.activate_all();
        for _ in 0..48 {
            d.finish_step();
        }
        // contexts 448 + 348 + 248 = 1044 exceed the 1000-token budget
        let ev = d.handle_growth_overflow();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].req, 2);
        assert!(d.projected_tokens() <= d.token_budget());
    }
}
