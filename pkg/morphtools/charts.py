"""
HTML chart builders for run reports. Each returns a self-contained HTML
string with plotly loaded from the CDN and a fixed div id, so reruns write
identical files.
"""
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from morphtools.variable_names import get_report_display_names

PALETTE = ["#1F4E79", "#C0504D", "#9BBB59", "#8064A2", "#F79646", "#4BACC6", "#7F7F7F"]
LOSS_TERMS = ["perceptual", "identity", "ms_ssim", "id_diff"]


def _layout(fig, chart_title, bottom_text, height=600):
    fig.update_layout(
        title={"text": chart_title, "font": {"size": 22}},
        height=height,
        template="plotly_white",
        font={"family": "Montserrat, sans-serif"},
        legend={"orientation": "h", "y": -0.18},
        margin={"b": 120},
    )
    if bottom_text:
        fig.add_annotation(text=bottom_text, showarrow=False, xref="paper", yref="paper",
                           x=0.5, y=-0.32, font={"size": 13})
    return fig


def _html(fig, div_id):
    return fig.to_html(include_plotlyjs="cdn", full_html=True, div_id=div_id)


def loss_trace_chart(trace, chart_title="Morph optimisation", bottom_text=""):
    names = get_report_display_names()
    fig = make_subplots(specs=[[{"secondary_y": True}]])
    fig.add_trace(go.Scatter(x=trace["iteration"], y=trace["total"], name=names["total"],
                             line={"color": PALETTE[0], "width": 3}), secondary_y=False)
    for color, term in zip(PALETTE[1:], LOSS_TERMS):
        if term in trace and trace[term].abs().sum() > 0:
            fig.add_trace(go.Scatter(x=trace["iteration"], y=trace[term], name=names[term],
                                     line={"color": color, "width": 1.5}), secondary_y=False)
    for term, dash in (("cos_1", "dot"), ("cos_2", "dash")):
        fig.add_trace(go.Scatter(x=trace["iteration"], y=trace[term], name=names[term],
                                 line={"color": PALETTE[-1], "dash": dash}), secondary_y=True)
    fig.update_xaxes(title_text="Iteration")
    fig.update_yaxes(title_text="Loss (raw terms)", secondary_y=False)
    fig.update_yaxes(title_text="Cosine similarity", secondary_y=True)
    return _html(_layout(fig, chart_title, bottom_text), "loss-trace")


def det_curve_chart(curves, chart_title="Detection error trade-off", bottom_text=""):
    """`curves` maps a cell label to a frame with apcer and bpcer columns."""
    fig = go.Figure()
    for i, (label, curve) in enumerate(curves.items()):
        fig.add_trace(go.Scatter(x=100.0 * curve["apcer"], y=100.0 * curve["bpcer"], name=label,
                                 mode="lines", line={"color": PALETTE[i % len(PALETTE)], "shape": "hv"}))
    fig.add_trace(go.Scatter(x=[0, 100], y=[0, 100], name="APCER = BPCER", mode="lines",
                             line={"color": "#BBBBBB", "dash": "dot"}))
    fig.update_xaxes(title_text="APCER (%)", range=[0, 100])
    fig.update_yaxes(title_text="BPCER (%)", range=[0, 100])
    return _html(_layout(fig, chart_title, bottom_text), "det-curves")


def sweep_chart(summary, chart_title="Loss weight sweep", bottom_text=""):
    """Final cosine similarities to both subjects per sweep case."""
    names = get_report_display_names()
    fig = go.Figure()
    for color, term in zip(PALETTE, ("cos_1", "cos_2")):
        fig.add_trace(go.Bar(x=summary["case"], y=summary[term], name=names[term], marker_color=color))
    fig.update_layout(barmode="group")
    fig.update_yaxes(title_text="Cosine similarity")
    return _html(_layout(fig, chart_title, bottom_text), "sweep-summary")
