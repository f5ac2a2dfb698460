//! Core of the NetSD emulation: an SPI-mode SD card, the switch that
//! multiplexes it between ports, a channel model, fault injection, a simulated
//! host controller and a small FAT layer.

pub mod arbiter;
pub mod audit;
pub mod backing;
pub mod blockdev;
pub mod bus;
pub mod crc;
pub mod events;
pub mod fat;
pub mod faults;
pub mod host;
pub mod sd;
pub mod switch;

pub use arbiter::{Arbiter, ArbiterError, Lease, Testbed, TestbedConfig};
pub use audit::{AuditReport, ExclusivityAudit};
pub use backing::{Backing, FileBacking, MemBacking};
pub use blockdev::{BlockDevice, BlockError, MemDisk};
pub use bus::{BusConfig, BusModel, Direction, Line, LineState, TransferMode, TransferStatus};
pub use events::{Event, EventKind, EventLog};
pub use fat::{DirEntry, FatError, FatVariant, FatVolume};
pub use faults::{FaultKind, FaultRequest, FaultSpec, FaultStatus, Trigger};
pub use host::{HostConfig, HostError, HostSession, HostStats};
pub use sd::{CardConfig, SdCard, SdCommand, SdError, SdResponse};
pub use switch::{PortId, Switch, SwitchError};
