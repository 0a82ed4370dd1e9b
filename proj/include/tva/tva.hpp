#pragma once

#include "tva/address_map.hpp"
#include "tva/bootstrap.hpp"
#include "tva/decode.hpp"
#include "tva/disassemble.hpp"
#include "tva/elf.hpp"
#include "tva/error.hpp"
#include "tva/passes.hpp"
#include "tva/report.hpp"
#include "tva/rewrite.hpp"
#include "tva/x86_emit.hpp"
