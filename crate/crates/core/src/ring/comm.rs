//! Point-to-point plumbing shared by every ring protocol.
//!
//! Both executors run the same per-rank compute closure on the same data and
//! differ only in how messages move: the round-based executor shifts a
//! vector between steps, the threaded one runs a worker per rank over
//! channels. Outputs are keyed by source rank, never by arrival order, so
//! the two produce identical results.

use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use super::{Executor, RingTopology};
use crate::error::{Error, Result};

/// What a rank computed at one ring step.
pub(crate) struct StepOutput<O> {
    /// Rank that originally owned the block held at this step.
    pub source: usize,
    pub value: O,
}

/// Passes one block per rank around the ring `N - 1` times. At step `j`
/// rank `k` holds the block that started on rank `(k - j) mod N` and calls
/// `compute(k, source, block)`.
pub(crate) fn circulate<M, O, F>(
    exec: Executor,
    topo: RingTopology,
    initial: Vec<M>,
    compute: F,
) -> Result<Vec<Vec<StepOutput<O>>>>
where
    M: Send + Sync,
    O: Send,
    F: Fn(usize, usize, &M) -> Result<O> + Sync,
{
    let n = topo.n_ranks;
    if initial.len() != n {
        return Err(Error::Engine(format!(
            "{} blocks for a ring of {} ranks",
            initial.len(),
            n
        )));
    }
    match exec {
        Executor::RoundBased => {
            let mut held = initial;
            let mut out: Vec<Vec<StepOutput<O>>> = (0..n).map(|_| Vec::with_capacity(n)).collect();
            for j in 0..n {
                // Every send of step j lands before any compute of step j + 1.
                for (k, block) in held.iter().enumerate() {
                    let source = topo.source_at(k, j);
                    out[k].push(StepOutput {
                        source,
                        value: compute(k, source, block)?,
                    });
                }
                if j + 1 < n {
                    held.rotate_right(1);
                }
            }
            Ok(out)
        }
        Executor::Threaded => {
            let mut senders = Vec::with_capacity(n);
            let mut receivers = Vec::with_capacity(n);
            for _ in 0..n {
                let (tx, rx) = mpsc::channel::<Arc<M>>();
                senders.push(tx);
                receivers.push(rx);
            }
            // Channel k carries traffic into rank k.
            senders.rotate_left(1);
            let compute = &compute;
            thread::scope(|scope| {
                let handles: Vec<_> = initial
                    .into_iter()
                    .zip(senders)
                    .zip(receivers)
                    .enumerate()
                    .map(|(k, ((block, to_next), from_prev))| {
                        scope.spawn(move || -> Result<Vec<StepOutput<O>>> {
                            let mut held = Arc::new(block);
                            let mut out = Vec::with_capacity(n);
                            for j in 0..n {
                                let last = j + 1 == n;
                                if !last {
                                    to_next.send(Arc::clone(&held)).map_err(|_| {
                                        Error::Engine(format!("rank {k}: next rank hung up"))
                                    })?;
                                }
                                let source = topo.source_at(k, j);
                                out.push(StepOutput {
                                    source,
                                    value: compute(k, source, &held)?,
                                });
                                if !last {
                                    held = from_prev.recv().map_err(|_| {
                                        Error::Engine(format!("rank {k}: previous rank hung up"))
                                    })?;
                                }
                            }
                            Ok(out)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("rank worker panicked"))
                    .collect()
            })
        }
    }
}

/// Delivers `outgoing[k][d]` from rank `k` to rank `d` using `N - 1`
/// pairwise rounds: in round `r` rank `k` sends to `k + r` and receives from
/// `k - r`. Returns `incoming[d][k]`.
pub(crate) fn all_to_all<O: Send>(
    exec: Executor,
    topo: RingTopology,
    outgoing: Vec<Vec<O>>,
) -> Result<Vec<Vec<O>>> {
    let n = topo.n_ranks;
    if outgoing.len() != n || outgoing.iter().any(|row| row.len() != n) {
        return Err(Error::Engine(
            "all-to-all payload does not have one entry per rank pair".into(),
        ));
    }
    match exec {
        Executor::RoundBased => {
            let mut slots: Vec<Vec<Option<O>>> = outgoing
                .into_iter()
                .map(|row| row.into_iter().map(Some).collect())
                .collect();
            let mut incoming: Vec<Vec<Option<O>>> =
                (0..n).map(|_| (0..n).map(|_| None).collect()).collect();
            for r in 0..n {
                for k in 0..n {
                    let d = (k + r) % n;
                    incoming[d][k] = slots[k][d].take();
                }
            }
            Ok(incoming
                .into_iter()
                .map(|row| row.into_iter().map(|o| o.expect("slot filled")).collect())
                .collect())
        }
        Executor::Threaded => {
            let mut senders = Vec::with_capacity(n);
            let mut receivers = Vec::with_capacity(n);
            for _ in 0..n {
                let (tx, rx) = mpsc::channel::<(usize, O)>();
                senders.push(tx);
                receivers.push(rx);
            }
            thread::scope(|scope| {
                let handles: Vec<_> = outgoing
                    .into_iter()
                    .zip(receivers)
                    .enumerate()
                    .map(|(k, (row, inbox))| {
                        let senders = senders.clone();
                        scope.spawn(move || -> Result<Vec<O>> {
                            let mut mine: Vec<Option<O>> = row.into_iter().map(Some).collect();
                            let mut got: Vec<Option<O>> = (0..n).map(|_| None).collect();
                            got[k] = mine[k].take();
                            for r in 1..n {
                                let d = (k + r) % n;
                                let item = mine[d].take().expect("item sent once");
                                senders[d].send((k, item)).map_err(|_| {
                                    Error::Engine(format!("rank {k}: rank {d} hung up"))
                                })?;
                                let (from, item) = inbox.recv().map_err(|_| {
                                    Error::Engine(format!("rank {k}: all-to-all peer hung up"))
                                })?;
                                got[from] = Some(item);
                            }
                            got.into_iter()
                                .map(|o| {
                                    o.ok_or_else(|| {
                                        Error::Engine(format!("rank {k}: all-to-all slot missing"))
                                    })
                                })
                                .collect()
                        })
                    })
                    .collect();
                drop(senders);
                handles
                    .into_iter()
                    .map(|h| h.join().expect("rank worker panicked"))
                    .collect()
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_circulate(exec: Executor, n: usize) -> Vec<Vec<(usize, usize)>> {
        let topo = RingTopology::new(n).unwrap();
        let blocks: Vec<usize> = (0..n).map(|k| 100 + k).collect();
        circulate(exec, topo, blocks, |k, s, b| {
            assert_eq!(*b, 100 + s);
            Ok((k, *b))
        })
        .unwrap()
        .into_iter()
        .map(|steps| steps.into_iter().map(|o| (o.source, o.value.1)).collect())
        .collect()
    }

    #[test]
    fn every_rank_sees_every_block_once() {
        for n in [1, 2, 3, 5, 8] {
            for exec in [Executor::RoundBased, Executor::Threaded] {
                let seen = run_circulate(exec, n);
                for (k, steps) in seen.iter().enumerate() {
                    let mut sources: Vec<usize> = steps.iter().map(|s| s.0).collect();
                    assert_eq!(sources[0], k);
                    sources.sort();
                    assert_eq!(sources, (0..n).collect::<Vec<_>>());
                }
            }
        }
    }

    #[test]
    fn executors_agree() {
        for n in [1, 2, 4, 7] {
            assert_eq!(
                run_circulate(Executor::RoundBased, n),
                run_circulate(Executor::Threaded, n)
            );
        }
    }

    #[test]
    fn all_to_all_transposes() {
        for n in [1, 2, 3, 6] {
            let topo = RingTopology::new(n).unwrap();
            let make = || -> Vec<Vec<(usize, usize)>> {
                (0..n).map(|k| (0..n).map(|d| (k, d)).collect()).collect()
            };
            for exec in [Executor::RoundBased, Executor::Threaded] {
                let got = all_to_all(exec, topo, make()).unwrap();
                for (d, row) in got.iter().enumerate() {
                    for (k, item) in row.iter().enumerate() {
                        assert_eq!(*item, (k, d));
                    }
                }
            }
        }
    }

    #[test]
    fn all_to_all_rejects_ragged_payload() {
        let topo = RingTopology::new(2).unwrap();
        let bad = vec![vec![1], vec![2, 3]];
        assert!(all_to_all(Executor::RoundBased, topo, bad).is_err());
    }
}
