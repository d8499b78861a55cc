#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "revtrain/arch.hpp"

namespace revtrain {

// Buffer categories tracked by the schedule replay.
enum class MemCategory { activation, gradient, input };

struct ScheduleEvent {
  std::string label;
  std::int64_t activation = 0;  // live bytes per category after the event
  std::int64_t gradient = 0;
  std::int64_t input = 0;
};

struct Schedule {
  std::vector<ScheduleEvent> events;
  std::size_t peak_event = 0;          // argmax of activation + gradient
  std::size_t peak_all_event = 0;      // argmax of activation + gradient + input
  std::int64_t saved_state_bytes = 0;  // stash + head input after the forward
  std::int64_t input_bytes = 0;

  const ScheduleEvent& peak() const { return events.at(peak_event); }
};

// Symbolic replay of one training step (forward, loss, backward) with the
// same allocation order as model_forward / model_backward. Persistent buffers
// (weights, their gradients, optimizer state, batch statistics) are not part
// of the replay; see MemoryReport.
Schedule simulate_schedule(const ArchSpec& spec, BackpropMode mode, std::int64_t h, std::int64_t w,
                           std::int64_t bs);

// Parameter bytes: conv c_in*c_out*k*k + c_out, coupling 2*((c/2)^2*k*k + c/2),
// batch norm 2c, head c*classes + classes.
std::int64_t parameter_count(const ArchSpec& spec);
std::int64_t weight_bytes(const ArchSpec& spec);
// Cached batch statistics: 2c scalars per batch norm.
std::int64_t stats_bytes(const ArchSpec& spec);

struct MemoryReport {
  std::string name;
  BackpropMode mode = BackpropMode::stored;
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::int64_t bs = 0;
  int bpe = 4;

  std::int64_t weight_bytes = 0;            // M_theta
  double activation_bytes_per_pixel = 0.0;  // M_z' (amortized statistics included outside Stored)
  double gradient_bytes_per_pixel = 0.0;    // M_g'
  std::string peak_step;

  // Line items outside the bytes-per-pixel total.
  std::int64_t stats_bytes = 0;
  std::int64_t weight_grad_bytes = 0;
  std::int64_t optimizer_bytes = 0;
  std::int64_t input_bytes = 0;
  std::int64_t saved_state_bytes = 0;

  std::int64_t peak_schedule_bytes = 0;  // M_theta + simulated activation/gradient peak (+ stats outside Stored)
  std::int64_t peak_all_bytes = 0;       // every tensor a real training step holds at its peak

  double pixels() const { return static_cast<double>(h) * static_cast<double>(w) * static_cast<double>(bs); }
  double bytes_per_pixel() const { return activation_bytes_per_pixel + gradient_bytes_per_pixel; }
  // M_theta + (M_z' + M_g') * h * w * bs
  double total() const { return static_cast<double>(weight_bytes) + bytes_per_pixel() * pixels(); }
};

MemoryReport memory_report(const ArchSpec& spec, BackpropMode mode, std::int64_t h, std::int64_t w,
                           std::int64_t bs);

// Per-pixel costs at the simulated peak, evaluated at the architecture's reference
// size (its golden dims).
double activation_bytes_per_pixel(const ArchSpec& spec, BackpropMode mode);
double gradient_bytes_per_pixel(const ArchSpec& spec, BackpropMode mode);

// Structural per-pixel estimate (no replay): Stored sums the stored set plus
// the largest gradient pair; reversible modes take the worst segment of
// working activation + gradient + its transient buffers.
double closed_form_bytes_per_pixel(const ArchSpec& spec, BackpropMode mode);

// CSV with columns component,bytes,bytes_per_pixel.
std::string report_csv(const MemoryReport& r);

struct GoldenCheck {
  std::string quantity;  // bytes_per_pixel | weight_bytes | total_bytes
  double expected = 0.0;
  double actual = 0.0;
  double tolerance = 0.0;  // absolute for bytes_per_pixel, relative otherwise
  bool pass = false;
};

// Compares a report against the architecture's [golden] targets: bytes per pixel within
// 0.05 B (amortized statistics), weights and total within 2%.
std::vector<GoldenCheck> golden_checks(const ArchSpec& spec, const MemoryReport& r);

}  // namespace revtrain
