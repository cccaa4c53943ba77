//! Versioned JSON snapshots of networks.
//!
//! Weights are written row-major per layer. `serde_json` prints the shortest
//! decimal that parses back to the same `f64`, so the round trip is bit-exact.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Activation, Network, Role};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Snapshot {
    pub version: u32,
    pub role: Role,
    pub activation: String,
    pub c_leaky: f64,
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
}

impl From<&Network> for Snapshot {
    fn from(net: &Network) -> Self {
        let activation = match net.activation() {
            Activation::Rectifier => "relu",
            Activation::LeakyRectifier { .. } => "leaky_relu",
        };
        Snapshot {
            version: SNAPSHOT_VERSION,
            role: net.role(),
            activation: activation.to_string(),
            c_leaky: net.activation().c_leaky(),
            layer_sizes: net.layer_sizes(),
            weights: net
                .weights()
                .iter()
                .map(|w| w.iter().copied().collect())
                .collect(),
        }
    }
}

impl TryFrom<Snapshot> for Network {
    type Error = Error;

    fn try_from(snap: Snapshot) -> Result<Network> {
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::SnapshotVersion(snap.version));
        }
        let activation = match snap.activation.as_str() {
            "relu" => {
                if snap.c_leaky != 0.0 {
                    return Err(Error::Parse("relu snapshot with nonzero c_leaky".into()));
                }
                Activation::Rectifier
            }
            "leaky_relu" => Activation::leaky(snap.c_leaky)?,
            other => return Err(Error::Parse(format!("unknown activation {other:?}"))),
        };
        if snap.layer_sizes.len() != snap.weights.len() + 1 {
            return Err(Error::Parse("layer_sizes and weights disagree on depth".into()));
        }
        let weights = snap
            .layer_sizes
            .windows(2)
            .zip(snap.weights)
            .map(|(sizes, flat)| {
                Array2::from_shape_vec((sizes[0] + 1, sizes[1]), flat)
                    .map_err(|e| Error::Parse(format!("weight shape: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(snap.role, activation, weights)
    }
}

impl Network {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Snapshot::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Network> {
        let snap: Snapshot = serde_json::from_str(text)?;
        Network::try_from(snap)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Network> {
        Network::from_json(&fs::read_to_string(path)?)
    }
}
