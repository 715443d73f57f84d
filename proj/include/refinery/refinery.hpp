#pragma once

#include "refinery/backends.hpp"
#include "refinery/core.hpp"
#include "refinery/cot_format.hpp"
#include "refinery/diagnostics.hpp"
#include "refinery/prompts.hpp"
#include "refinery/stage1.hpp"
#include "refinery/stage2.hpp"
