//! Racks of hosts behind top-of-rack switches joined by a pooled spine.

use serde::{Deserialize, Serialize};

use bwbroker::units::{self, Bps, Nanos, GBPS, NS_PER_US};

use crate::link::LinkId;

fn d_racks() -> u32 {
    9
}
fn d_hosts() -> u32 {
    10
}
fn d_nic() -> Bps {
    10 * GBPS
}
fn d_uplink() -> Bps {
    80 * GBPS
}
fn d_spine() -> u32 {
    4
}
fn d_prop() -> Nanos {
    10 * NS_PER_US
}
fn d_ecn() -> u64 {
    80_000
}
fn d_limit() -> u64 {
    1_000_000
}
fn d_mtu() -> u32 {
    1500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    #[serde(default = "d_racks")]
    pub racks: u32,
    #[serde(default = "d_hosts")]
    pub hosts_per_rack: u32,
    #[serde(default = "d_nic", with = "units::rate")]
    pub nic_rate: Bps,
    /// Aggregate rack-to-spine capacity, split evenly over the spine links.
    #[serde(default = "d_uplink", with = "units::rate")]
    pub uplink: Bps,
    #[serde(default = "d_spine")]
    pub spine_links: u32,
    /// Per hop.
    #[serde(default = "d_prop", with = "units::duration")]
    pub prop_delay: Nanos,
    #[serde(default = "d_ecn", with = "units::size")]
    pub ecn_threshold: u64,
    #[serde(default = "d_limit", with = "units::size")]
    pub queue_limit: u64,
    #[serde(default = "d_mtu")]
    pub mtu: u32,
}

impl Default for TopologySpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TopologySpec {
    pub fn hosts(&self) -> u32 {
        self.racks * self.hosts_per_rack
    }

    /// Host capacity over uplink capacity.
    pub fn oversubscription(&self) -> f64 {
        (self.hosts_per_rack as u64 * self.nic_rate) as f64 / self.uplink as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinkKind {
    HostTx(u32),
    HostRx(u32),
    RackUp(u32),
    RackDown(u32),
}

#[derive(Debug, Clone)]
pub struct Topology {
    pub spec: TopologySpec,
    /// Spine members up per rack.
    pub spine_up: Vec<Vec<bool>>,
}

impl Topology {
    pub fn new(spec: TopologySpec) -> Self {
        let spine_up = vec![vec![true; spec.spine_links.max(1) as usize]; spec.racks as usize];
        Topology { spec, spine_up }
    }

    pub fn hosts(&self) -> u32 {
        self.spec.hosts()
    }

    pub fn rack_of(&self, host: u32) -> u32 {
        host / self.spec.hosts_per_rack
    }

    pub fn hosts_in(&self, rack: u32) -> std::ops::Range<u32> {
        rack * self.spec.hosts_per_rack..(rack + 1) * self.spec.hosts_per_rack
    }

    pub fn link_count(&self) -> usize {
        (2 * self.hosts() + 2 * self.spec.racks) as usize
    }

    pub fn link_id(&self, kind: LinkKind) -> LinkId {
        let h = self.hosts();
        match kind {
            LinkKind::HostTx(x) => x,
            LinkKind::HostRx(x) => h + x,
            LinkKind::RackUp(r) => 2 * h + r,
            LinkKind::RackDown(r) => 2 * h + self.spec.racks + r,
        }
    }

    pub fn link_kind(&self, id: LinkId) -> LinkKind {
        let h = self.hosts();
        let r = self.spec.racks;
        if id < h {
            LinkKind::HostTx(id)
        } else if id < 2 * h {
            LinkKind::HostRx(id - h)
        } else if id < 2 * h + r {
            LinkKind::RackUp(id - 2 * h)
        } else {
            LinkKind::RackDown(id - 2 * h - r)
        }
    }

    pub fn link_name(&self, id: LinkId) -> String {
        match self.link_kind(id) {
            LinkKind::HostTx(x) => format!("host:{x}:tx"),
            LinkKind::HostRx(x) => format!("host:{x}:rx"),
            LinkKind::RackUp(r) => format!("rack:{r}:up"),
            LinkKind::RackDown(r) => format!("rack:{r}:down"),
        }
    }

    /// Capacity of a rack's pooled spine bundle given which members are up.
    pub fn rack_capacity(&self, rack: u32) -> Bps {
        let members = &self.spine_up[rack as usize];
        let up = members.iter().filter(|&&u| u).count() as u64;
        self.spec.uplink * up / members.len() as u64
    }

    pub fn initial_capacity(&self, id: LinkId) -> Bps {
        match self.link_kind(id) {
            LinkKind::HostTx(_) | LinkKind::HostRx(_) => self.spec.nic_rate,
            LinkKind::RackUp(r) | LinkKind::RackDown(r) => self.rack_capacity(r),
        }
    }

    /// Hops from `src` to `dst`: NIC, then the spine both ways if the racks differ.
    pub fn route(&self, src: u32, dst: u32) -> ([LinkId; 4], u8) {
        let (rs, rd) = (self.rack_of(src), self.rack_of(dst));
        let tx = self.link_id(LinkKind::HostTx(src));
        let rx = self.link_id(LinkKind::HostRx(dst));
        if rs == rd {
            ([tx, rx, 0, 0], 2)
        } else {
            ([tx, self.link_id(LinkKind::RackUp(rs)), self.link_id(LinkKind::RackDown(rd)), rx], 4)
        }
    }

    /// One-way propagation delay between two hosts.
    pub fn path_delay(&self, src: u32, dst: u32) -> Nanos {
        let hops = if self.rack_of(src) == self.rack_of(dst) { 2 } else { 4 };
        hops * self.spec.prop_delay
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_testbed_shape() {
        let t = TopologySpec::default();
        assert_eq!((t.racks, t.hosts_per_rack, t.nic_rate, t.uplink), (9, 10, 10 * GBPS, 80 * GBPS));
        assert!((t.oversubscription() - 1.25).abs() < 1e-12);
    }

    #[test]
    fn ids_and_routes() {
        let topo = Topology::new(TopologySpec::default());
        for id in 0..topo.link_count() as u32 {
            assert_eq!(topo.link_id(topo.link_kind(id)), id);
        }
        assert_eq!(topo.route(0, 5).1, 2);
        let (r, n) = topo.route(3, 85);
        assert_eq!(n, 4);
        assert_eq!(topo.link_name(r[1]), "rack:0:up");
        assert_eq!(topo.link_name(r[2]), "rack:8:down");
        assert_eq!(topo.link_name(r[3]), "host:85:rx");
    }

    #[test]
    fn spine_members_pool() {
        let mut topo = Topology::new(TopologySpec::default());
        topo.spine_up[2][0] = false;
        assert_eq!(topo.rack_capacity(2), 60 * GBPS);
    }
}
