/// Per-node ring buffer holding the last `max_lag + 1` states.
///
/// Every incoming path reads the transmitter's ring at its own lag, so each
/// state is stored once regardless of fan-out.
#[derive(Debug, Clone)]
pub struct DelayLine {
    nodes: usize,
    len: usize,
    /// Slot of the most recent sample.
    head: usize,
    /// Node-major rings.
    buf: Vec<f64>,
}

impl DelayLine {
    /// `init(i, m)` gives node `i`'s value `m` samples in the past.
    pub fn new(nodes: usize, max_lag: usize, mut init: impl FnMut(usize, usize) -> f64) -> Self {
        let len = max_lag + 1;
        let mut buf = vec![0.0; nodes * len];
        for i in 0..nodes {
            for m in 0..len {
                // slot of lag m when head = 0
                buf[i * len + (len - m) % len] = init(i, m);
            }
        }
        Self {
            nodes,
            len,
            head: 0,
            buf,
        }
    }

    pub fn max_lag(&self) -> usize {
        self.len - 1
    }

    /// Value of `node` `lag` samples ago.
    #[inline]
    pub fn get(&self, node: usize, lag: usize) -> f64 {
        debug_assert!(lag < self.len);
        let slot = (self.head + self.len - lag) % self.len;
        self.buf[node * self.len + slot]
    }

    /// Appends one sample per node, dropping the oldest.
    pub fn push(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.nodes);
        self.head = (self.head + 1) % self.len;
        for (i, v) in values.iter().enumerate() {
            self.buf[i * self.len + self.head] = *v;
        }
    }
}
