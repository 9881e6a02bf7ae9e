//! Episode trajectories and their line-delimited JSON dump format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Action;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("dump: {0}")]
    Format(String),
}

/// One episode: the T observations the policy received, the T actions it
/// took, and T+1 poses (the last one is the terminal pose, kept so success
/// and occupancy metrics are recomputable from dumps).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub poses: Vec<(f64, f64, f64)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn check_consistent(&self) -> Result<(), DumpError> {
        if self.observations.len() != self.actions.len()
            || self.poses.len() != self.actions.len() + 1
        {
            return Err(DumpError::Format(format!(
                "inconsistent trajectory: {} obs, {} actions, {} poses",
                self.observations.len(),
                self.actions.len(),
                self.poses.len()
            )));
        }
        Ok(())
    }
}

/// One line of a trajectory dump. The terminal snapshot of an episode has
/// `action` and `obs` set to null.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpRecord {
    pub episode_id: u64,
    pub task_id: i64,
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub action: Option<u8>,
    pub obs: Option<Vec<f64>>,
    /// Optional per-step reward trace: (raw, smoothed, whitened).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<(f64, f64, f64)>,
}

pub fn write_episode<W: Write>(
    w: &mut W,
    episode_id: u64,
    task_id: i64,
    traj: &Trajectory,
    rewards: Option<&[(f64, f64, f64)]>,
) -> Result<(), DumpError> {
    traj.check_consistent()?;
    for t in 0..traj.len() {
        let (x, y, heading) = traj.poses[t];
        let rec = DumpRecord {
            episode_id,
            task_id,
            t,
            x,
            y,
            heading,
            action: Some(traj.actions[t].index() as u8),
            obs: Some(traj.observations[t].clone()),
            reward: rewards.map(|r| r[t]),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    let (x, y, heading) = traj.poses[traj.len()];
    let rec = DumpRecord {
        episode_id,
        task_id,
        t: traj.len(),
        x,
        y,
        heading,
        action: None,
        obs: None,
        reward: None,
    };
    serde_json::to_writer(&mut *w, &rec)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Reads a dump back into trajectories, grouped by episode_id in the order
/// episodes first appear.
pub fn read_dump<R: BufRead>(r: R) -> Result<Vec<(u64, i64, Trajectory)>, DumpError> {
    let mut order: Vec<u64> = Vec::new();
    let mut by_episode: std::collections::HashMap<u64, (i64, Vec<DumpRecord>)> =
        std::collections::HashMap::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DumpRecord = serde_json::from_str(&line)?;
        let entry = by_episode.entry(rec.episode_id).or_insert_with(|| {
            order.push(rec.episode_id);
            (rec.task_id, Vec::new())
        });
        entry.1.push(rec);
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let (task_id, mut recs) = by_episode.remove(&id).unwrap();
        recs.sort_by_key(|r| r.t);
        let mut traj = Trajectory {
            observations: Vec::new(),
            actions: Vec::new(),
            poses: Vec::new(),
        };
        for rec in &recs {
            traj.poses.push((rec.x, rec.y, rec.heading));
            match (rec.action, &rec.obs) {
                (Some(a), Some(obs)) => {
                    let action = Action::from_index(a as usize).ok_or_else(|| {
                        DumpError::Format(format!("episode {id}: bad action index {a}"))
                    })?;
                    traj.actions.push(action);
                    traj.observations.push(obs.clone());
                }
                (None, None) => {}
                _ => {
                    return Err(DumpError::Format(format!(
                        "episode {id} t={}: action/obs must be both set or both null",
                        rec.t
                    )))
                }
            }
        }
        traj.check_consistent()?;
        out.push((id, task_id, traj));
    }
    Ok(out)
}
