use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::geo::{bearing, haversine_distance, LatLon};
use crate::matcher::GridIndex;

pub type NodeId = u64;
pub type SegmentId = u64;

/// Default edge length of a spatial-index cell, meters.
pub const DEFAULT_CELL_SIZE_M: f64 = 200.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("network has no nodes")]
    NoNodes,
    #[error("network has no edges")]
    NoEdges,
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("duplicate segment id {0}")]
    DuplicateSegment(SegmentId),
    #[error("segment {segment}: dangling endpoint {node}")]
    DanglingEndpoint { segment: SegmentId, node: NodeId },
    #[error("node {0}: coordinates out of range")]
    InvalidCoordinate(NodeId),
    #[error("segment {0}: endpoints coincide")]
    ZeroLengthSegment(SegmentId),
    #[error(
        "segment {segment}: length {length} m outside [0.5, 2.0] x great-circle distance {great_circle} m"
    )]
    ImplausibleLength {
        segment: SegmentId,
        length: f64,
        great_circle: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadNode {
    pub node_id: NodeId,
    pub lat: f64,
    pub lon: f64,
}

impl RoadNode {
    pub fn position(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub segment_id: SegmentId,
    pub from_node: NodeId,
    pub to_node: NodeId,
    /// Meters.
    pub length: f64,
}

/// Resolved endpoint coordinates of a segment, kept alongside it for matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct SegmentGeometry {
    pub from: LatLon,
    pub to: LatLon,
    /// Bearing of the `from -> to` chord.
    pub bearing: f64,
}

/// Validated road network with a uniform-grid segment index.
///
/// Segments are stored sorted by id, so positional indices order the same
/// way ids do.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    nodes: Vec<RoadNode>,
    segments: Vec<RoadSegment>,
    geometry: Vec<SegmentGeometry>,
    node_lookup: HashMap<NodeId, usize>,
    segment_lookup: HashMap<SegmentId, usize>,
    index: GridIndex,
}

impl RoadNetwork {
    pub fn new(nodes: Vec<RoadNode>, segments: Vec<RoadSegment>) -> Result<Self, NetworkError> {
        Self::with_cell_size(nodes, segments, DEFAULT_CELL_SIZE_M)
    }

    pub fn with_cell_size(
        nodes: Vec<RoadNode>,
        mut segments: Vec<RoadSegment>,
        cell_size: f64,
    ) -> Result<Self, NetworkError> {
        if nodes.is_empty() {
            return Err(NetworkError::NoNodes);
        }
        if segments.is_empty() {
            return Err(NetworkError::NoEdges);
        }
        let mut node_lookup = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if !node.position().is_valid() {
                return Err(NetworkError::InvalidCoordinate(node.node_id));
            }
            if node_lookup.insert(node.node_id, i).is_some() {
                return Err(NetworkError::DuplicateNode(node.node_id));
            }
        }

        segments.sort_by_key(|s| s.segment_id);
        let mut segment_lookup = HashMap::with_capacity(segments.len());
        let mut geometry = Vec::with_capacity(segments.len());
        for (i, seg) in segments.iter().enumerate() {
            if segment_lookup.insert(seg.segment_id, i).is_some() {
                return Err(NetworkError::DuplicateSegment(seg.segment_id));
            }
            let endpoint = |node: NodeId| {
                node_lookup
                    .get(&node)
                    .map(|&idx| nodes[idx].position())
                    .ok_or(NetworkError::DanglingEndpoint {
                        segment: seg.segment_id,
                        node,
                    })
            };
            let (from, to) = (endpoint(seg.from_node)?, endpoint(seg.to_node)?);
            let great_circle = haversine_distance(from, to);
            let seg_bearing =
                bearing(from, to).map_err(|_| NetworkError::ZeroLengthSegment(seg.segment_id))?;
            if !(seg.length > 0.0
                && seg.length >= 0.5 * great_circle
                && seg.length <= 2.0 * great_circle)
            {
                return Err(NetworkError::ImplausibleLength {
                    segment: seg.segment_id,
                    length: seg.length,
                    great_circle,
                });
            }
            geometry.push(SegmentGeometry {
                from,
                to,
                bearing: seg_bearing,
            });
        }

        let index = GridIndex::build(&nodes, &geometry, cell_size);
        Ok(Self {
            nodes,
            segments,
            geometry,
            node_lookup,
            segment_lookup,
            index,
        })
    }

    pub fn nodes(&self) -> &[RoadNode] {
        &self.nodes
    }

    /// Segments in ascending id order.
    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn node(&self, id: NodeId) -> Option<&RoadNode> {
        self.node_lookup.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn segment(&self, id: SegmentId) -> Option<&RoadSegment> {
        self.segment_lookup.get(&id).map(|&i| &self.segments[i])
    }

    pub fn segment_bearing(&self, id: SegmentId) -> Option<f64> {
        self.segment_lookup
            .get(&id)
            .map(|&i| self.geometry[i].bearing)
    }

    pub fn index(&self) -> &GridIndex {
        &self.index
    }

    /// Replaces the spatial index with one using a different cell size.
    pub fn rebuild_index(&mut self, cell_size: f64) {
        self.index = GridIndex::build(&self.nodes, &self.geometry, cell_size);
    }

    pub(crate) fn geometry(&self) -> &[SegmentGeometry] {
        &self.geometry
    }
}
