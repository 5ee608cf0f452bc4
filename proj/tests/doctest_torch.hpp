#pragma once

// torch's logging macros define CHECK as well; doctest's must win.
#include <torch/torch.h>
#undef CHECK
#include <doctest.h>
