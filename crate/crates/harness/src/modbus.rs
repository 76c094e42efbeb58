//! Typed register read/write records carried as Modbus-style payloads.
//!
//! Layout: function code (1 byte), register (u16 BE), value (u16 BE). For reads
//! the value is the register count.

use std::fmt;

use serde::{Deserialize, Serialize};

pub const MODBUS_PORT: u16 = 502;
pub const RECORD_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Function {
    ReadHoldingRegisters,
    WriteSingleRegister,
}

impl Function {
    pub fn code(self) -> u8 {
        match self {
            Function::ReadHoldingRegisters => 0x03,
            Function::WriteSingleRegister => 0x06,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0x03 => Some(Function::ReadHoldingRegisters),
            0x06 => Some(Function::WriteSingleRegister),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModbusOp {
    pub function: Function,
    pub register: u16,
    pub value: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModbusError {
    #[error("record is {0} bytes, expected {RECORD_LEN}")]
    Length(usize),
    #[error("unknown function code {0:#04x}")]
    Function(u8),
}

impl ModbusOp {
    pub fn read(register: u16, count: u16) -> Self {
        ModbusOp { function: Function::ReadHoldingRegisters, register, value: count }
    }

    pub fn write(register: u16, value: u16) -> Self {
        ModbusOp { function: Function::WriteSingleRegister, register, value }
    }

    pub fn encode(&self) -> [u8; RECORD_LEN] {
        let r = self.register.to_be_bytes();
        let v = self.value.to_be_bytes();
        [self.function.code(), r[0], r[1], v[0], v[1]]
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModbusError> {
        if bytes.len() != RECORD_LEN {
            return Err(ModbusError::Length(bytes.len()));
        }
        let function = Function::from_code(bytes[0]).ok_or(ModbusError::Function(bytes[0]))?;
        Ok(ModbusOp {
            function,
            register: u16::from_be_bytes([bytes[1], bytes[2]]),
            value: u16::from_be_bytes([bytes[3], bytes[4]]),
        })
    }
}

impl fmt::Display for ModbusOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.function {
            Function::ReadHoldingRegisters => write!(f, "read {} x{}", self.register, self.value),
            Function::WriteSingleRegister => write!(f, "write {}={}", self.register, self.value),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn write_example() {
        let op = ModbusOp::write(40001, 75);
        let bytes = op.encode();
        // independent decode of the documented layout
        assert_eq!(bytes[0], 0x06);
        assert_eq!(u16::from(bytes[1]) << 8 | u16::from(bytes[2]), 40001);
        assert_eq!(u16::from(bytes[3]) << 8 | u16::from(bytes[4]), 75);
        assert_eq!(ModbusOp::decode(&bytes), Ok(op));
    }

    #[test]
    fn rejects_malformed() {
        assert_eq!(ModbusOp::decode(&[6, 0, 1]), Err(ModbusError::Length(3)));
        assert_eq!(ModbusOp::decode(&[0x10, 0, 0, 0, 0]), Err(ModbusError::Function(0x10)));
    }

    proptest! {
        #[test]
        fn round_trip(write in any::<bool>(), register in any::<u16>(), value in any::<u16>()) {
            let op = if write { ModbusOp::write(register, value) } else { ModbusOp::read(register, value) };
            prop_assert_eq!(ModbusOp::decode(&op.encode()), Ok(op));
        }
    }
}
