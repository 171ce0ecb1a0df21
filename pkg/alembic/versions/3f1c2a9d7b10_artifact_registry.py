"""artifact registry

Revision ID: 3f1c2a9d7b10
Revises:
Create Date: 2026-10-17 10:12:41.503218

"""
from typing import Sequence, Union

from alembic import op
import sqlalchemy as sa


revision: str = "3f1c2a9d7b10"
down_revision: Union[str, None] = None
branch_labels: Union[str, Sequence[str], None] = None
depends_on: Union[str, Sequence[str], None] = None


def upgrade() -> None:
    op.create_table(
        "audit_runs",
        sa.Column("id", sa.Integer(), nullable=False),
        sa.Column("config_hash", sa.String(length=64), nullable=False),
        sa.Column("cell", sa.String(), nullable=False),
        sa.Column("status", sa.String(), nullable=False),
        sa.Column("started_at", sa.DateTime(), nullable=False),
        sa.Column("finished_at", sa.DateTime(), nullable=True),
        sa.Column("report_path", sa.String(), nullable=True),
        sa.Column("error", sa.Text(), nullable=True),
        sa.PrimaryKeyConstraint("id"),
    )
    op.create_index(op.f("ix_audit_runs_id"), "audit_runs", ["id"], unique=False)
    op.create_index(op.f("ix_audit_runs_config_hash"), "audit_runs", ["config_hash"], unique=False)
    op.create_table(
        "cached_artifacts",
        sa.Column("id", sa.Integer(), nullable=False),
        sa.Column("kind", sa.String(), nullable=False),
        sa.Column("key", sa.String(length=64), nullable=False),
        sa.Column("path", sa.String(), nullable=False),
        sa.Column("created_at", sa.DateTime(), nullable=False),
        sa.Column("last_used_at", sa.DateTime(), nullable=False),
        sa.PrimaryKeyConstraint("id"),
    )
    op.create_index(op.f("ix_cached_artifacts_id"), "cached_artifacts", ["id"], unique=False)
    op.create_index(op.f("ix_cached_artifacts_kind"), "cached_artifacts", ["kind"], unique=False)
    op.create_index(op.f("ix_cached_artifacts_key"), "cached_artifacts", ["key"], unique=True)


def downgrade() -> None:
    op.drop_index(op.f("ix_cached_artifacts_key"), table_name="cached_artifacts")
    op.drop_index(op.f("ix_cached_artifacts_kind"), table_name="cached_artifacts")
    op.drop_index(op.f("ix_cached_artifacts_id"), table_name="cached_artifacts")
    op.drop_table("cached_artifacts")
    op.drop_index(op.f("ix_audit_runs_config_hash"), table_name="audit_runs")
    op.drop_index(op.f("ix_audit_runs_id"), table_name="audit_runs")
    op.drop_table("audit_runs")
